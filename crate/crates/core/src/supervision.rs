//! Hard word alignments, their conversion into row-stochastic attention
//! targets, and the Euclidean distance between attention and target.
//!
//! Positions are 1-indexed `(t, i)` pairs: `t` is the target word, `i` the
//! source word. Row `m` and column `l` belong to the end-of-sentence tokens.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Added under the square root in the backward pass of the distance.
pub const DISTANCE_SQRT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("link ({t}, {i}) outside a {m}x{l} alignment grid")]
    OutOfRange {
        t: usize,
        i: usize,
        m: usize,
        l: usize,
    },
    #[error("target eos row {m} may only link to source eos {l}, got ({m}, {i})")]
    EosRow { m: usize, l: usize, i: usize },
    #[error("alignment grid must be at least 1x1, got {m}x{l}")]
    EmptyGrid { m: usize, l: usize },
    #[error("dimension mismatch: attention {attn:?} vs supervision {sup:?}")]
    DimensionMismatch { attn: Vec<usize>, sup: Vec<usize> },
    #[error("invalid smoothing configuration: {0}")]
    BadConfig(String),
    #[error("supervision text line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SupervisionError>;

/// 0/1 link set over an `m × l` grid (both sizes include eos).
///
/// The target eos row may only hold the eos-eos link `(m, l)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAlignment {
    m: usize,
    l: usize,
    links: BTreeSet<(usize, usize)>,
}

impl HardAlignment {
    pub fn new(
        m: usize,
        l: usize,
        links: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if m == 0 || l == 0 {
            return Err(SupervisionError::EmptyGrid { m, l });
        }
        let mut out = Self {
            m,
            l,
            links: BTreeSet::new(),
        };
        for (t, i) in links {
            out.insert(t, i)?;
        }
        Ok(out)
    }

    pub fn empty(m: usize, l: usize) -> Result<Self> {
        Self::new(m, l, [])
    }

    pub fn insert(&mut self, t: usize, i: usize) -> Result<()> {
        if t == 0 || i == 0 || t > self.m || i > self.l {
            return Err(SupervisionError::OutOfRange {
                t,
                i,
                m: self.m,
                l: self.l,
            });
        }
        if t == self.m && i != self.l {
            return Err(SupervisionError::EosRow {
                m: self.m,
                l: self.l,
                i,
            });
        }
        self.links.insert((t, i));
        Ok(())
    }

    pub fn target_len(&self) -> usize {
        self.m
    }

    pub fn source_len(&self) -> usize {
        self.l
    }

    pub fn links(&self) -> &BTreeSet<(usize, usize)> {
        &self.links
    }

    pub fn contains(&self, t: usize, i: usize) -> bool {
        self.links.contains(&(t, i))
    }

    fn row(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.links.range((t, 0)..(t + 1, 0)).map(|&(_, i)| i)
    }

    /// True when every target row has a link and `(m, l)` is present.
    pub fn is_complete(&self) -> bool {
        self.contains(self.m, self.l) && (1..=self.m).all(|t| self.row(t).next().is_some())
    }
}

/// Attaches every unaligned target word to the source eos and links the two
/// eos tokens. Existing links are kept.
pub fn complete_alignment(raw: &HardAlignment) -> HardAlignment {
    let mut out = raw.clone();
    for t in 1..=raw.m {
        if raw.row(t).next().is_none() {
            out.links.insert((t, raw.l));
        }
    }
    out.links.insert((raw.m, raw.l));
    out
}

/// Row-stochastic `m × l` attention target.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionMatrix {
    values: Tensor,
}

impl SupervisionMatrix {
    /// Wraps a matrix, checking that it is row-stochastic within `1e-6`.
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(SupervisionError::DimensionMismatch {
                attn: values.shape().to_vec(),
                sup: vec![],
            });
        }
        for t in 0..values.rows() {
            let row = values.row(t);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(SupervisionError::BadConfig(format!(
                    "row {} has entries outside [0, 1]",
                    t + 1
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(SupervisionError::BadConfig(format!(
                    "row {} sums to {s}",
                    t + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn target_len(&self) -> usize {
        self.values.rows()
    }

    pub fn source_len(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.values.get(t - 1, i - 1)
    }

    /// Text form: a `"m l"` line then one line of `l` values per row.
    pub fn to_text(&self) -> String {
        write_matrix_text(&self.values)
    }
}

pub fn write_matrix_text(m: &Tensor) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", m.rows(), m.cols());
    for t in 0..m.rows() {
        let row: Vec<String> = m.row(t).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Reads every matrix in a stream of concatenated text-format matrices.
pub fn read_matrices<R: BufRead>(reader: R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate();
    while let Some((no, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dims: Vec<usize> = line
            .split_whitespace()
            .map(|d| d.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SupervisionError::Parse {
                line: no + 1,
                msg: format!("bad header {line:?}: {e}"),
            })?;
        let &[m, l] = dims.as_slice() else {
            return Err(SupervisionError::Parse {
                line: no + 1,
                msg: format!("header must be \"m l\", got {line:?}"),
            });
        };
        let mut data = Vec::with_capacity(m * l);
        for _ in 0..m {
            let Some((rno, row)) = lines.next() else {
                return Err(SupervisionError::Parse {
                    line: no + 1,
                    msg: "matrix truncated".into(),
                });
            };
            let row = row?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SupervisionError::Parse {
                    line: rno + 1,
                    msg: format!("{e}"),
                })?;
            if vals.len() != l {
                return Err(SupervisionError::Parse {
                    line: rno + 1,
                    msg: format!("expected {l} values, got {}", vals.len()),
                });
            }
            data.extend(vals);
        }
        out.push(
            Tensor::matrix(m, l, data).map_err(|e| SupervisionError::Parse {
                line: no + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub window: usize,
    pub sigma: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            window: 2,
            sigma: 0.5,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SupervisionError::BadConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Unnormalized Gaussian centred at 0: `exp(-δ² / 2σ²)`.
    pub fn kernel(&self, offset: isize) -> f64 {
        let d = offset as f64;
        (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

fn normalize_rows(mut m: Tensor) -> Tensor {
    let l = m.cols();
    for row in m.data_mut().chunks_exact_mut(l) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    m
}

/// Row-normalized link indicators.
///
/// Panics if a row has no link; call [`complete_alignment`] first.
pub fn simple_transform(a: &HardAlignment) -> SupervisionMatrix {
    let mut m = Tensor::zeros(&[a.m, a.l]);
    for &(t, i) in &a.links {
        m.set(t - 1, i - 1, 1.0);
    }
    assert!(
        (0..a.m).all(|t| m.row(t).iter().any(|&v| v > 0.0)),
        "simple_transform needs a completed alignment"
    );
    SupervisionMatrix {
        values: normalize_rows(m),
    }
}

/// Unnormalized kernel sums before row normalization.
///
/// Real-word links spread over `i-w ..= i+w`, clipped to `1 ..= l-1`; links
/// into the eos column stay a point mass.
pub fn smoothed_increments(a: &HardAlignment, cfg: &SmoothingConfig) -> Tensor {
    let mut m = Tensor::zeros(&[a.m, a.l]);
    let w = cfg.window as isize;
    let l = a.l as isize;
    for &(t, i) in &a.links {
        if i == a.l {
            let v = m.get(t - 1, i - 1);
            m.set(t - 1, i - 1, v + 1.0);
            continue;
        }
        for delta in -w..=w {
            let j = i as isize + delta;
            if j < 1 || j > l - 1 {
                continue;
            }
            let j = j as usize;
            let v = m.get(t - 1, j - 1);
            m.set(t - 1, j - 1, v + cfg.kernel(delta));
        }
    }
    m
}

/// Gaussian-smoothed, row-normalized link matrix.
pub fn smoothed_transform(a: &HardAlignment, cfg: &SmoothingConfig) -> Result<SupervisionMatrix> {
    cfg.validate()?;
    let m = smoothed_increments(a, cfg);
    assert!(
        (0..a.m).all(|t| m.row(t).iter().any(|&v| v > 0.0)),
        "smoothed_transform needs a completed alignment"
    );
    Ok(SupervisionMatrix {
        values: normalize_rows(m),
    })
}

/// Builds the supervision for a raw alignment: completion, then the simple
/// transform (`smoothing == None`) or the smoothed one.
pub fn build_supervision(
    raw: &HardAlignment,
    smoothing: Option<&SmoothingConfig>,
) -> Result<SupervisionMatrix> {
    let done = complete_alignment(raw);
    match smoothing {
        None => Ok(simple_transform(&done)),
        Some(cfg) => smoothed_transform(&done, cfg),
    }
}

fn check_dims(attn: &Tensor, sup: &Tensor) -> Result<()> {
    if attn.shape() != sup.shape() || attn.rank() != 2 {
        return Err(SupervisionError::DimensionMismatch {
            attn: attn.shape().to_vec(),
            sup: sup.shape().to_vec(),
        });
    }
    Ok(())
}

/// Frobenius distance between two equally-sized matrices.
pub fn alignment_distance(attn: &Tensor, sup: &SupervisionMatrix) -> Result<f64> {
    check_dims(attn, &sup.values)?;
    Ok(frobenius(attn, &sup.values))
}

pub(crate) fn frobenius(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Tape-tracked distance; `attn` must be an `m × l` node.
pub fn alignment_distance_var(tape: &mut Tape, attn: Var, sup: &SupervisionMatrix) -> Result<Var> {
    check_dims(tape.value(attn), &sup.values)?;
    let target = tape.constant(sup.values.clone());
    let diff = tape.sub(attn, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.sqrt_eps(total, DISTANCE_SQRT_EPS)?)
}
