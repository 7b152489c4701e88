//! Attention-based encoder-decoder.
//!
//! A bidirectional GRU encodes the source; at each target step a two-layer
//! feed-forward network scores every encoder state against the previous
//! decoder state and previous target embedding, a GRU decoder consumes the
//! attention-weighted context, and a two-layer output network predicts the
//! next token.
//!
//! Every tensor belongs to partition [`Partition::A`] (everything that feeds
//! the decoder state) or [`Partition::T`] (the output network).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::SentencePair;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model dimensions: {0}")]
    Dims(String),
    #[error("{side} sentence is empty")]
    EmptySentence { side: &'static str },
    #[error("token id {id} outside {side} vocabulary of size {size}")]
    TokenRange {
        side: &'static str,
        id: usize,
        size: usize,
    },
    #[error("source mask must mark a non-empty prefix of {0} positions")]
    BadMask(usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    A,
    T,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::A => "A",
            Partition::T => "T",
        }
    }
}

/// Which tensors a training phase may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionFilter {
    A,
    T,
    All,
}

impl PartitionFilter {
    pub fn contains(self, p: Partition) -> bool {
        match self {
            PartitionFilter::A => p == Partition::A,
            PartitionFilter::T => p == Partition::T,
            PartitionFilter::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub out_hidden: usize,
}

impl ModelDims {
    /// Desk-scale defaults (64-wide everything) for the given vocabularies.
    pub fn with_vocab(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            embed: 64,
            hidden: 64,
            attn_hidden: 64,
            out_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attn_hidden", self.attn_hidden),
            ("out_hidden", self.out_hidden),
        ];
        for (name, v) in all {
            if v == 0 {
                return Err(ModelError::Dims(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Every trainable tensor, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    SrcEmbed,
    TgtEmbed,
    BosEmbed,
    EncFwdInput,
    EncFwdGates,
    EncFwdCandidate,
    EncFwdBias,
    EncBwdInput,
    EncBwdGates,
    EncBwdCandidate,
    EncBwdBias,
    InitState,
    AttnState,
    AttnSource,
    AttnPrev,
    AttnBias,
    AttnScore,
    DecInput,
    DecGates,
    DecCandidate,
    DecBias,
    OutHidden,
    OutBias,
    OutVocab,
}

impl ParamId {
    pub const ALL: [ParamId; 24] = [
        ParamId::SrcEmbed,
        ParamId::TgtEmbed,
        ParamId::BosEmbed,
        ParamId::EncFwdInput,
        ParamId::EncFwdGates,
        ParamId::EncFwdCandidate,
        ParamId::EncFwdBias,
        ParamId::EncBwdInput,
        ParamId::EncBwdGates,
        ParamId::EncBwdCandidate,
        ParamId::EncBwdBias,
        ParamId::InitState,
        ParamId::AttnState,
        ParamId::AttnSource,
        ParamId::AttnPrev,
        ParamId::AttnBias,
        ParamId::AttnScore,
        ParamId::DecInput,
        ParamId::DecGates,
        ParamId::DecCandidate,
        ParamId::DecBias,
        ParamId::OutHidden,
        ParamId::OutBias,
        ParamId::OutVocab,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::SrcEmbed => "src_embed",
            ParamId::TgtEmbed => "tgt_embed",
            ParamId::BosEmbed => "bos_embed",
            ParamId::EncFwdInput => "enc_fwd.w_input",
            ParamId::EncFwdGates => "enc_fwd.w_gates",
            ParamId::EncFwdCandidate => "enc_fwd.w_candidate",
            ParamId::EncFwdBias => "enc_fwd.bias",
            ParamId::EncBwdInput => "enc_bwd.w_input",
            ParamId::EncBwdGates => "enc_bwd.w_gates",
            ParamId::EncBwdCandidate => "enc_bwd.w_candidate",
            ParamId::EncBwdBias => "enc_bwd.bias",
            ParamId::InitState => "dec.w_init",
            ParamId::AttnState => "attn.w_state",
            ParamId::AttnSource => "attn.w_source",
            ParamId::AttnPrev => "attn.w_prev",
            ParamId::AttnBias => "attn.bias",
            ParamId::AttnScore => "attn.v",
            ParamId::DecInput => "dec.w_input",
            ParamId::DecGates => "dec.w_gates",
            ParamId::DecCandidate => "dec.w_candidate",
            ParamId::DecBias => "dec.bias",
            ParamId::OutHidden => "out.w_hidden",
            ParamId::OutBias => "out.bias",
            ParamId::OutVocab => "out.w_vocab",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub fn shape(self, d: &ModelDims) -> Vec<usize> {
        let (e, h, a, o) = (d.embed, d.hidden, d.attn_hidden, d.out_hidden);
        match self {
            ParamId::SrcEmbed => vec![d.src_vocab, e],
            ParamId::TgtEmbed => vec![d.tgt_vocab, e],
            ParamId::BosEmbed => vec![e],
            ParamId::EncFwdInput | ParamId::EncBwdInput => vec![3 * h, e],
            ParamId::EncFwdGates | ParamId::EncBwdGates | ParamId::DecGates => vec![2 * h, h],
            ParamId::EncFwdCandidate | ParamId::EncBwdCandidate | ParamId::DecCandidate => {
                vec![h, h]
            }
            ParamId::EncFwdBias | ParamId::EncBwdBias | ParamId::DecBias => vec![3 * h],
            ParamId::InitState => vec![h, h],
            ParamId::AttnState => vec![a, h],
            ParamId::AttnSource => vec![a, 2 * h],
            ParamId::AttnPrev => vec![a, e],
            ParamId::AttnBias => vec![a],
            ParamId::AttnScore => vec![a],
            ParamId::DecInput => vec![3 * h, e + 2 * h],
            ParamId::OutHidden => vec![o, h + e],
            ParamId::OutBias => vec![o],
            ParamId::OutVocab => vec![d.tgt_vocab, o],
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            ParamId::EncFwdBias
                | ParamId::EncBwdBias
                | ParamId::AttnBias
                | ParamId::DecBias
                | ParamId::OutBias
        )
    }

    /// Partition under the default split, the target-side embeddings going
    /// to `target_embedding`.
    pub fn partition(self, target_embedding: Partition) -> Partition {
        match self {
            ParamId::OutHidden | ParamId::OutBias | ParamId::OutVocab => Partition::T,
            ParamId::TgtEmbed | ParamId::BosEmbed => target_embedding,
            _ => Partition::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Weights are drawn uniform in `[-scale, scale]`.
    pub scale: f64,
    pub target_embedding: Partition,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            scale: INIT_SCALE,
            target_embedding: Partition::A,
        }
    }
}

/// All model tensors with their partition tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub seed: u64,
    tensors: Vec<Tensor>,
    partitions: Vec<Partition>,
}

impl ModelParams {
    /// Weights uniform in ±0.08, biases zero, target embeddings in A.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init_with(dims, seed, &InitOptions::default())
    }

    pub fn init_with(dims: ModelDims, seed: u64, opts: &InitOptions) -> Result<Self> {
        dims.validate()?;
        if !(opts.scale >= 0.0 && opts.scale.is_finite()) {
            return Err(ModelError::Dims(format!(
                "init scale {} is invalid",
                opts.scale
            )));
        }
        let scale = opts.scale;
        let target_embedding = opts.target_embedding;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(ParamId::ALL.len());
        for id in ParamId::ALL {
            let shape = id.shape(&dims);
            let mut t = Tensor::zeros(&shape);
            if !id.is_bias() {
                for v in t.data_mut() {
                    *v = rng.gen_range(-scale..=scale);
                }
            }
            tensors.push(t);
        }
        Ok(Self {
            dims,
            seed,
            tensors,
            partitions: ParamId::ALL
                .iter()
                .map(|p| p.partition(target_embedding))
                .collect(),
        })
    }

    /// Assembles parameters from loaded parts, checking every shape.
    pub fn from_parts(
        dims: ModelDims,
        seed: u64,
        tensors: Vec<Tensor>,
        partitions: Vec<Partition>,
    ) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != ParamId::ALL.len() || partitions.len() != tensors.len() {
            return Err(ModelError::Dims(format!(
                "expected {} tensors, got {}",
                ParamId::ALL.len(),
                tensors.len()
            )));
        }
        for (id, t) in ParamId::ALL.iter().zip(&tensors) {
            if t.shape() != id.shape(&dims).as_slice() {
                return Err(ModelError::Dims(format!(
                    "{} has shape {:?}, expected {:?}",
                    id.name(),
                    t.shape(),
                    id.shape(&dims)
                )));
            }
        }
        Ok(Self {
            dims,
            seed,
            tensors,
            partitions,
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        self.partitions[id.index()]
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    /// Ids of the tensors selected by `which`, in storage order.
    pub fn partition_filter(&self, which: PartitionFilter) -> Vec<ParamId> {
        ParamId::ALL
            .iter()
            .copied()
            .filter(|&id| which.contains(self.partition(id)))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Parameters recorded as leaves of one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    dims: ModelDims,
}

impl ParamVars {
    /// Tensors inside `trainable` become tracked leaves, the rest constants.
    pub fn load(tape: &mut Tape, params: &ModelParams, trainable: Option<PartitionFilter>) -> Self {
        let vars = ParamId::ALL
            .iter()
            .map(|&id| {
                let value = params.get(id).clone();
                match trainable {
                    Some(f) if f.contains(params.partition(id)) => tape.param(value),
                    _ => tape.constant(value),
                }
            })
            .collect();
        Self {
            vars,
            dims: params.dims,
        }
    }

    /// Wraps leaves already on a tape, one per tensor in storage order.
    pub fn from_vars(vars: Vec<Var>, dims: ModelDims) -> Self {
        assert_eq!(vars.len(), ParamId::ALL.len(), "one var per tensor");
        Self { vars, dims }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }
}

struct GruWeights {
    input: Var,
    gates: Var,
    candidate: Var,
    bias: Var,
}

impl ParamVars {
    fn gru(&self, input: ParamId, gates: ParamId, candidate: ParamId, bias: ParamId) -> GruWeights {
        GruWeights {
            input: self.get(input),
            gates: self.get(gates),
            candidate: self.get(candidate),
            bias: self.get(bias),
        }
    }
}

/// One GRU step: `z`/`r` gates, candidate `tanh(Wx + U(r⊙h) + b)`, and
/// `h' = h + z⊙(n − h)`.
fn gru_step(tape: &mut Tape, w: &GruWeights, x: Var, h: Var, hidden: usize) -> Result<Var> {
    let gx = tape.matvec(w.input, x)?;
    let gx = tape.add(gx, w.bias)?;
    let gh = tape.matvec(w.gates, h)?;
    let xz = tape.slice(gx, 0, hidden)?;
    let hz = tape.slice(gh, 0, hidden)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let xr = tape.slice(gx, hidden, hidden)?;
    let hr = tape.slice(gh, hidden, hidden)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let hn = tape.matvec(w.candidate, rh)?;
    let xn = tape.slice(gx, 2 * hidden, hidden)?;
    let n = tape.add(xn, hn)?;
    let n = tape.tanh(n)?;
    let delta = tape.sub(n, h)?;
    let step = tape.mul(z, delta)?;
    Ok(tape.add(h, step)?)
}

/// Encoder output on a tape. Padded positions hold zero states.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    /// `[→h_i; ←h_i]` rows, `L × 2·hidden`.
    pub states: Var,
    pub forward_mat: Var,
    pub backward_mat: Var,
    /// `states · W_sourceᵀ`, shared by every attention step.
    pub keys: Var,
    pub mask: Option<Vec<bool>>,
    /// Number of real (unpadded) positions.
    pub len: usize,
}

fn check_ids(side: &'static str, ids: &[usize], size: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(ModelError::EmptySentence { side });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= size) {
        return Err(ModelError::TokenRange { side, id, size });
    }
    Ok(())
}

fn real_len(len: usize, mask: Option<&[bool]>) -> Result<usize> {
    let Some(m) = mask else { return Ok(len) };
    let n = m.iter().take_while(|&&b| b).count();
    if m.len() != len || n == 0 || m[n..].iter().any(|&b| b) {
        return Err(ModelError::BadMask(len));
    }
    Ok(n)
}

pub fn encode_on_tape(
    tape: &mut Tape,
    p: &ParamVars,
    src_ids: &[usize],
    mask: Option<&[bool]>,
) -> Result<EncoderVars> {
    let d = *p.dims();
    check_ids("source", src_ids, d.src_vocab)?;
    let len = real_len(src_ids.len(), mask)?;
    let h = d.hidden;
    let emb: Vec<Var> = src_ids[..len]
        .iter()
        .map(|&id| tape.row(p.get(ParamId::SrcEmbed), id))
        .collect::<std::result::Result<_, _>>()?;

    let fwd_w = p.gru(
        ParamId::EncFwdInput,
        ParamId::EncFwdGates,
        ParamId::EncFwdCandidate,
        ParamId::EncFwdBias,
    );
    let bwd_w = p.gru(
        ParamId::EncBwdInput,
        ParamId::EncBwdGates,
        ParamId::EncBwdCandidate,
        ParamId::EncBwdBias,
    );
    let zero = tape.constant(Tensor::zeros(&[h]));
    let mut forward = Vec::with_capacity(src_ids.len());
    let mut state = zero;
    for &x in &emb {
        state = gru_step(tape, &fwd_w, x, state, h)?;
        forward.push(state);
    }
    let mut backward = vec![zero; len];
    let mut state = zero;
    for i in (0..len).rev() {
        state = gru_step(tape, &bwd_w, emb[i], state, h)?;
        backward[i] = state;
    }
    forward.resize(src_ids.len(), zero);
    backward.resize(src_ids.len(), zero);

    let rows: Vec<Var> = forward
        .iter()
        .zip(&backward)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<std::result::Result<_, _>>()?;
    let states = tape.stack(&rows)?;
    let forward_mat = tape.stack(&forward)?;
    let backward_mat = tape.stack(&backward)?;
    let keys = tape.matmul_t(states, p.get(ParamId::AttnSource))?;
    Ok(EncoderVars {
        forward,
        backward,
        states,
        forward_mat,
        backward_mat,
        keys,
        mask: mask.map(<[bool]>::to_vec),
        len,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `L × attn_hidden` intermediate layer.
    pub hidden: Var,
    pub scores: Var,
    pub alpha: Var,
}

pub fn attend_on_tape(
    tape: &mut Tape,
    p: &ParamVars,
    enc: &EncoderVars,
    s_prev: Var,
    y_prev: Var,
) -> Result<AttentionVars> {
    let qs = tape.matvec(p.get(ParamId::AttnState), s_prev)?;
    let qy = tape.matvec(p.get(ParamId::AttnPrev), y_prev)?;
    let q = tape.add(qs, qy)?;
    let q = tape.add(q, p.get(ParamId::AttnBias))?;
    let pre = tape.add_rows(enc.keys, q)?;
    let hidden = tape.tanh(pre)?;
    let scores = tape.matvec(hidden, p.get(ParamId::AttnScore))?;
    let alpha = tape.masked_softmax(scores, enc.mask.as_deref())?;
    Ok(AttentionVars {
        hidden,
        scores,
        alpha,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub attention: AttentionVars,
    pub context: Var,
    pub state: Var,
    pub output: Var,
    pub log_probs: Var,
}

/// Embedding of the previous target token; `None` is begin-of-sentence.
pub fn target_embedding(tape: &mut Tape, p: &ParamVars, prev: Option<usize>) -> Result<Var> {
    match prev {
        None => Ok(p.get(ParamId::BosEmbed)),
        Some(id) => {
            check_ids("target", &[id], p.dims().tgt_vocab)?;
            Ok(tape.row(p.get(ParamId::TgtEmbed), id)?)
        }
    }
}

/// `s₀ = tanh(W_init · ←h₁)`.
pub fn initial_state(tape: &mut Tape, p: &ParamVars, enc: &EncoderVars) -> Result<Var> {
    let s = tape.matvec(p.get(ParamId::InitState), enc.backward[0])?;
    Ok(tape.tanh(s)?)
}

pub fn decode_step_on_tape(
    tape: &mut Tape,
    p: &ParamVars,
    enc: &EncoderVars,
    s_prev: Var,
    y_prev: Var,
) -> Result<StepVars> {
    let d = *p.dims();
    let attention = attend_on_tape(tape, p, enc, s_prev, y_prev)?;
    let ctx_b = tape.vecmat(attention.alpha, enc.backward_mat)?;
    let ctx_f = tape.vecmat(attention.alpha, enc.forward_mat)?;
    let context = tape.concat(&[ctx_b, ctx_f])?;
    let x = tape.concat(&[y_prev, context])?;
    let w = p.gru(
        ParamId::DecInput,
        ParamId::DecGates,
        ParamId::DecCandidate,
        ParamId::DecBias,
    );
    let state = gru_step(tape, &w, x, s_prev, d.hidden)?;
    let hin = tape.concat(&[state, y_prev])?;
    let o = tape.matvec(p.get(ParamId::OutHidden), hin)?;
    let o = tape.add(o, p.get(ParamId::OutBias))?;
    let output = tape.tanh(o)?;
    let logits = tape.matvec(p.get(ParamId::OutVocab), output)?;
    let log_probs = tape.log_softmax(logits)?;
    Ok(StepVars {
        attention,
        context,
        state,
        output,
        log_probs,
    })
}

/// Teacher-forced pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub encoder: EncoderVars,
    pub steps: Vec<StepVars>,
    /// Scalar log-probability of each reference token.
    pub token_log_probs: Vec<Var>,
    /// `m × l` attention matrix restricted to real source positions.
    pub attention: Var,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    p: &ParamVars,
    src_ids: &[usize],
    src_mask: Option<&[bool]>,
    tgt_ids: &[usize],
) -> Result<TapeTrace> {
    check_ids("target", tgt_ids, p.dims().tgt_vocab)?;
    let encoder = encode_on_tape(tape, p, src_ids, src_mask)?;
    let mut s = initial_state(tape, p, &encoder)?;
    let mut prev = None;
    let mut steps = Vec::with_capacity(tgt_ids.len());
    let mut token_log_probs = Vec::with_capacity(tgt_ids.len());
    let mut rows = Vec::with_capacity(tgt_ids.len());
    for &y in tgt_ids {
        let emb = target_embedding(tape, p, prev)?;
        let step = decode_step_on_tape(tape, p, &encoder, s, emb)?;
        token_log_probs.push(tape.pick(step.log_probs, y)?);
        rows.push(tape.slice(step.attention.alpha, 0, encoder.len)?);
        steps.push(step);
        s = step.state;
        prev = Some(y);
    }
    let attention = tape.stack(&rows)?;
    Ok(TapeTrace {
        encoder,
        steps,
        token_log_probs,
        attention,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    /// `[→h_i; ←h_i]` for each position.
    pub states: Vec<Tensor>,
    pub forward: Vec<Tensor>,
    pub backward: Vec<Tensor>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub fn encode(src_ids: &[usize], params: &ModelParams) -> Result<EncoderStates> {
    let mut tape = Tape::new();
    let p = ParamVars::load(&mut tape, params, None);
    let enc = encode_on_tape(&mut tape, &p, src_ids, None)?;
    let states = (0..src_ids.len())
        .map(|i| {
            let mut v = tape.value(enc.forward[i]).data().to_vec();
            v.extend_from_slice(tape.value(enc.backward[i]).data());
            Tensor::vector(v)
        })
        .collect();
    Ok(EncoderStates {
        states,
        forward: enc.forward.iter().map(|&v| tape.value(v).clone()).collect(),
        backward: enc
            .backward
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
    })
}

/// Intermediate values of one attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIntermediates {
    /// `l × attn_hidden`.
    pub hidden: Tensor,
    pub scores: Tensor,
    pub alpha: Tensor,
}

fn encoder_constants(tape: &mut Tape, p: &ParamVars, enc: &EncoderStates) -> Result<EncoderVars> {
    let forward: Vec<Var> = enc
        .forward
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let backward: Vec<Var> = enc
        .backward
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let rows: Vec<Var> = enc
        .states
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let states = tape.stack(&rows)?;
    let forward_mat = tape.stack(&forward)?;
    let backward_mat = tape.stack(&backward)?;
    let keys = tape.matmul_t(states, p.get(ParamId::AttnSource))?;
    Ok(EncoderVars {
        len: forward.len(),
        forward,
        backward,
        states,
        forward_mat,
        backward_mat,
        keys,
        mask: None,
    })
}

pub fn attend(
    s_prev: &Tensor,
    enc: &EncoderStates,
    y_prev_embedding: &Tensor,
    params: &ModelParams,
) -> Result<AttentionIntermediates> {
    let mut tape = Tape::new();
    let p = ParamVars::load(&mut tape, params, None);
    let e = encoder_constants(&mut tape, &p, enc)?;
    let s = tape.constant(s_prev.clone());
    let y = tape.constant(y_prev_embedding.clone());
    let a = attend_on_tape(&mut tape, &p, &e, s, y)?;
    Ok(AttentionIntermediates {
        hidden: tape.value(a.hidden).clone(),
        scores: tape.value(a.scores).clone(),
        alpha: tape.value(a.alpha).clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub alpha: Tensor,
    pub context: Tensor,
    pub state: Tensor,
    pub output: Tensor,
    /// Log-probabilities over the whole target vocabulary.
    pub log_probs: Tensor,
}

/// One decoder step from explicit values; `y_prev = None` means
/// begin-of-sentence.
pub fn decode_step(
    s_prev: &Tensor,
    y_prev: Option<usize>,
    enc: &EncoderStates,
    params: &ModelParams,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let p = ParamVars::load(&mut tape, params, None);
    let e = encoder_constants(&mut tape, &p, enc)?;
    let s = tape.constant(s_prev.clone());
    let y = target_embedding(&mut tape, &p, y_prev)?;
    let st = decode_step_on_tape(&mut tape, &p, &e, s, y)?;
    Ok(StepOutput {
        alpha: tape.value(st.attention.alpha).clone(),
        context: tape.value(st.context).clone(),
        state: tape.value(st.state).clone(),
        output: tape.value(st.output).clone(),
        log_probs: tape.value(st.log_probs).clone(),
    })
}

/// `s₀` for an encoded sentence.
pub fn initial_decoder_state(enc: &EncoderStates, params: &ModelParams) -> Tensor {
    let w = params.get(ParamId::InitState);
    let b = enc.backward[0].data();
    let v = (0..w.rows())
        .map(|r| {
            w.row(r)
                .iter()
                .zip(b)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                .tanh()
        })
        .collect();
    Tensor::vector(v)
}

/// Per-sentence teacher-forced outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    pub log_probs: Vec<f64>,
    /// `m × l`.
    pub attention: Tensor,
    pub states: Vec<Tensor>,
    pub contexts: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
}

impl DecoderTrace {
    pub fn log_likelihood(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    fn from_tape(tape: &Tape, t: &TapeTrace) -> Self {
        Self {
            log_probs: t
                .token_log_probs
                .iter()
                .map(|&v| tape.value(v).item())
                .collect(),
            attention: tape.value(t.attention).clone(),
            states: t
                .steps
                .iter()
                .map(|s| tape.value(s.state).clone())
                .collect(),
            contexts: t
                .steps
                .iter()
                .map(|s| tape.value(s.context).clone())
                .collect(),
            outputs: t
                .steps
                .iter()
                .map(|s| tape.value(s.output).clone())
                .collect(),
        }
    }
}

pub fn forward_teacher_forced(pair: &SentencePair, params: &ModelParams) -> Result<DecoderTrace> {
    forward_padded(&pair.src_ids, None, &pair.tgt_ids, params)
}

/// Teacher-forced pass over a source padded to a batch width.
pub fn forward_padded(
    src_ids: &[usize],
    src_mask: Option<&[bool]>,
    tgt_ids: &[usize],
    params: &ModelParams,
) -> Result<DecoderTrace> {
    let mut tape = Tape::new();
    let p = ParamVars::load(&mut tape, params, None);
    let t = forward_on_tape(&mut tape, &p, src_ids, src_mask, tgt_ids)?;
    Ok(DecoderTrace::from_tape(&tape, &t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Batch, EOS};
    use crate::tensor::{check_gradients, GradCheckConfig};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            src_vocab: 9,
            tgt_vocab: 8,
            embed: 4,
            hidden: 5,
            attn_hidden: 3,
            out_hidden: 4,
        }
    }

    fn pair() -> SentencePair {
        SentencePair {
            src_ids: vec![3, 5, 4, 7, EOS],
            tgt_ids: vec![6, 3, 4, EOS],
            index: 0,
        }
    }

    fn grad_err(e: ModelError) -> TensorError {
        match e {
            ModelError::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny_dims(), 17).unwrap();
        let b = ModelParams::init(tiny_dims(), 17).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(tiny_dims(), 18).unwrap();
        assert_ne!(a, c);
        let wide = InitOptions {
            scale: 0.5,
            ..Default::default()
        };
        let w = ModelParams::init_with(tiny_dims(), 17, &wide).unwrap();
        assert!(w
            .get(ParamId::OutVocab)
            .data()
            .iter()
            .any(|v| v.abs() > INIT_SCALE));
        assert!(a.get(ParamId::DecBias).data().iter().all(|&v| v == 0.0));
        assert!(a
            .get(ParamId::OutVocab)
            .data()
            .iter()
            .all(|&v| v.abs() <= INIT_SCALE));
    }

    #[test]
    fn default_partition_split() {
        let p = ModelParams::init(tiny_dims(), 1).unwrap();
        assert_eq!(p.partition(ParamId::OutVocab), Partition::T);
        assert_eq!(p.partition(ParamId::AttnScore), Partition::A);
        assert_eq!(p.partition(ParamId::TgtEmbed), Partition::A);
        let t = p.partition_filter(PartitionFilter::T);
        assert_eq!(
            t,
            vec![ParamId::OutHidden, ParamId::OutBias, ParamId::OutVocab]
        );
        let a = p.partition_filter(PartitionFilter::A);
        let all = p.partition_filter(PartitionFilter::All);
        assert_eq!(all.len(), ParamId::ALL.len());
        assert_eq!(a.len() + t.len(), all.len());
        assert!(a.iter().all(|id| !t.contains(id)));

        let opts = InitOptions {
            target_embedding: Partition::T,
            ..Default::default()
        };
        let moved = ModelParams::init_with(tiny_dims(), 1, &opts).unwrap();
        assert_eq!(moved.partition(ParamId::TgtEmbed), Partition::T);
        assert_eq!(moved.partition_filter(PartitionFilter::T).len(), 5);
    }

    #[test]
    fn encode_single_token() {
        let p = ModelParams::init(tiny_dims(), 3).unwrap();
        let e = encode(&[EOS], &p).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.states[0].len(), 2 * tiny_dims().hidden);
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut p = ModelParams::init(tiny_dims(), 3).unwrap();
        for id in ParamId::ALL {
            if id != ParamId::SrcEmbed {
                p.get_mut(id).data_mut().fill(0.0);
            }
        }
        let e = encode(&[3, 4, 5, EOS], &p).unwrap();
        for s in &e.states {
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reversal_symmetry_of_directions() {
        let p = ModelParams::init(tiny_dims(), 5).unwrap();
        let mut swapped = p.clone();
        let pairs = [
            (ParamId::EncFwdInput, ParamId::EncBwdInput),
            (ParamId::EncFwdGates, ParamId::EncBwdGates),
            (ParamId::EncFwdCandidate, ParamId::EncBwdCandidate),
            (ParamId::EncFwdBias, ParamId::EncBwdBias),
        ];
        for (f, b) in pairs {
            *swapped.get_mut(f) = p.get(b).clone();
            *swapped.get_mut(b) = p.get(f).clone();
        }
        let src = [3, 6, 4, 8, EOS];
        let rev: Vec<usize> = src.iter().rev().copied().collect();
        let a = encode(&src, &p).unwrap();
        let b = encode(&rev, &swapped).unwrap();
        let l = src.len();
        for i in 0..l {
            assert_eq!(b.forward[i], a.backward[l - 1 - i]);
            assert_eq!(b.backward[i], a.forward[l - 1 - i]);
        }
    }

    #[test]
    fn attention_edge_cases() {
        let p = ModelParams::init(tiny_dims(), 2).unwrap();
        let e = encode(&[EOS], &p).unwrap();
        let s = Tensor::vector(vec![0.1; 5]);
        let y = Tensor::vector(vec![0.2; 4]);
        let a = attend(&s, &e, &y, &p).unwrap();
        assert_eq!(a.alpha.data(), &[1.0]);

        let enc = encode(&[3, EOS], &p).unwrap();
        let same = EncoderStates {
            states: vec![enc.states[0].clone(); 4],
            forward: vec![enc.forward[0].clone(); 4],
            backward: vec![enc.backward[0].clone(); 4],
        };
        let a = attend(&s, &same, &y, &p).unwrap();
        for &v in a.alpha.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let dims = tiny_dims();
        let p = ModelParams::init(dims, 8).unwrap();
        let enc = encode(&[3, 4, 6, EOS], &p).unwrap();
        let s = Tensor::vector(vec![0.3, -0.2, 0.1, 0.5, -0.4]);
        let y = Tensor::vector(vec![0.1, 0.2, -0.3, 0.05]);
        let c = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let ids = [
            ParamId::AttnState,
            ParamId::AttnSource,
            ParamId::AttnPrev,
            ParamId::AttnBias,
            ParamId::AttnScore,
        ];
        // Scale the weights up so the attention is far from uniform.
        let weights: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                let mut t = p.get(id).clone();
                t.scale(10.0);
                t.data_mut().iter_mut().for_each(|v| *v += 0.1);
                t
            })
            .collect();
        let cfg = GradCheckConfig {
            tolerance: 1e-5,
            ..Default::default()
        };
        let report = check_gradients(&weights, &cfg, |tape, w| {
            let mut pv = ParamVars::load(tape, &p, None);
            for (k, &id) in ids.iter().enumerate() {
                pv.vars[id.index()] = w[k];
            }
            let e = encoder_constants(tape, &pv, &enc).map_err(grad_err)?;
            let sv = tape.constant(s.clone());
            let yv = tape.constant(y.clone());
            let a = attend_on_tape(tape, &pv, &e, sv, yv).map_err(grad_err)?;
            let cv = tape.constant(c.clone());
            tape.dot(a.alpha, cv)
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn decode_step_normalizes_and_point_mass_context() {
        let p = ModelParams::init(tiny_dims(), 4).unwrap();
        let enc = encode(&[3, 4, 5, EOS], &p).unwrap();
        let s0 = initial_decoder_state(&enc, &p);
        let out = decode_step(&s0, None, &enc, &p).unwrap();
        assert!(out.log_probs.data().iter().all(|&v| v <= 0.0));
        let lse = out
            .log_probs
            .data()
            .iter()
            .map(|v| v.exp())
            .sum::<f64>()
            .ln();
        assert!(lse.abs() < 1e-6);

        // One-hot attention at k gives exactly [←h_k; →h_k].
        let k = 2;
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, &p, None);
        let e = encoder_constants(&mut tape, &pv, &enc).unwrap();
        let mut onehot = vec![0.0; 4];
        onehot[k] = 1.0;
        let alpha = tape.constant(Tensor::vector(onehot));
        let cb = tape.vecmat(alpha, e.backward_mat).unwrap();
        let cf = tape.vecmat(alpha, e.forward_mat).unwrap();
        let ctx = tape.concat(&[cb, cf]).unwrap();
        let mut want = enc.backward[k].data().to_vec();
        want.extend_from_slice(enc.forward[k].data());
        assert_eq!(tape.value(ctx).data(), want.as_slice());
    }

    #[test]
    fn decode_step_gradient_matches_finite_differences() {
        let dims = ModelDims {
            src_vocab: 6,
            tgt_vocab: 7,
            embed: 3,
            hidden: 4,
            attn_hidden: 3,
            out_hidden: 5,
        };
        let p = ModelParams::init(dims, 12).unwrap();
        let params: Vec<Tensor> = p.tensors().to_vec();
        let report = check_gradients(
            &params,
            &GradCheckConfig {
                tolerance: 1e-5,
                ..Default::default()
            },
            |tape, w| {
                let pv = ParamVars {
                    vars: w.to_vec(),
                    dims,
                };
                let e = encode_on_tape(tape, &pv, &[3, 4, EOS], None).map_err(grad_err)?;
                let s0 = initial_state(tape, &pv, &e).map_err(grad_err)?;
                let y = target_embedding(tape, &pv, Some(5)).map_err(grad_err)?;
                let st = decode_step_on_tape(tape, &pv, &e, s0, y).map_err(grad_err)?;
                tape.pick(st.log_probs, 2)
            },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn teacher_forced_trace_matches_stepwise_recomputation() {
        let p = ModelParams::init(tiny_dims(), 6).unwrap();
        let pr = pair();
        let trace = forward_teacher_forced(&pr, &p).unwrap();
        assert_eq!(trace.attention.shape(), &[pr.m(), pr.l()]);
        for t in 0..pr.m() {
            let s: f64 = trace.attention.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(trace.log_probs.iter().all(|&v| v <= 0.0));

        let enc = encode(&pr.src_ids, &p).unwrap();
        let mut s = initial_decoder_state(&enc, &p);
        let mut prev = None;
        let mut total = 0.0;
        for (t, &y) in pr.tgt_ids.iter().enumerate() {
            let out = decode_step(&s, prev, &enc, &p).unwrap();
            total += out.log_probs.data()[y];
            assert_eq!(out.alpha.data(), trace.attention.row(t));
            s = out.state;
            prev = Some(y);
        }
        assert!((total - trace.log_likelihood()).abs() < 1e-12);

        let again = forward_teacher_forced(&pr, &p).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn padding_does_not_change_trace() {
        let p = ModelParams::init(tiny_dims(), 7).unwrap();
        let short = pair();
        let long = SentencePair {
            src_ids: vec![3, 4, 5, 6, 7, 8, 4, EOS],
            tgt_ids: vec![3, EOS],
            index: 1,
        };
        let batch = Batch::new(vec![short.clone(), long], None);
        let padded = forward_padded(
            &batch.src_ids[0],
            Some(&batch.src_mask[0]),
            &short.tgt_ids,
            &p,
        )
        .unwrap();
        let plain = forward_teacher_forced(&short, &p).unwrap();
        assert_eq!(padded, plain);
    }

    #[test]
    fn bad_inputs_rejected() {
        let p = ModelParams::init(tiny_dims(), 7).unwrap();
        assert!(matches!(
            encode(&[], &p),
            Err(ModelError::EmptySentence { .. })
        ));
        assert!(matches!(
            encode(&[99], &p),
            Err(ModelError::TokenRange { .. })
        ));
        assert!(forward_padded(&[3, EOS], Some(&[false, true]), &[EOS], &p).is_err());
        let mut d = tiny_dims();
        d.hidden = 0;
        assert!(ModelParams::init(d, 1).is_err());
    }
}
