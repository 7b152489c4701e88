use std::fmt;

use crate::model::PartitionFilter;

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Translation,
    Alignment,
    Joint,
}

impl Objective {
    pub fn needs_supervision(self) -> bool {
        self != Objective::Translation
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Translation => "TRANS",
            Objective::Alignment => "ALIGN",
            Objective::Joint => "JOINT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TRANS" | "TRANSLATION" => Some(Objective::Translation),
            "ALIGN" | "ALIGNMENT" => Some(Objective::Alignment),
            "JOINT" => Some(Objective::Joint),
            _ => None,
        }
    }
}

fn filter_str(f: PartitionFilter) -> &'static str {
    match f {
        PartitionFilter::A => "A",
        PartitionFilter::T => "T",
        PartitionFilter::All => "ALL",
    }
}

fn parse_filter(s: &str) -> Option<PartitionFilter> {
    match s.to_ascii_uppercase().as_str() {
        "A" => Some(PartitionFilter::A),
        "T" => Some(PartitionFilter::T),
        "ALL" => Some(PartitionFilter::All),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub objective: Objective,
    pub trainable: PartitionFilter,
    pub epochs: usize,
}

impl Phase {
    pub fn new(objective: Objective, trainable: PartitionFilter, epochs: usize) -> Self {
        Self {
            objective,
            trainable,
            epochs,
        }
    }

    /// `OBJ:PART`, used in the training log.
    pub fn label(&self) -> String {
        format!("{}:{}", self.objective.as_str(), filter_str(self.trainable))
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.label(), self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.phases.iter().map(Phase::to_string).collect();
        f.write_str(&parts.join("->"))
    }
}

fn shorthand(letter: &str) -> Option<(Objective, PartitionFilter)> {
    match letter {
        "A" => Some((Objective::Alignment, PartitionFilter::A)),
        "T" => Some((Objective::Translation, PartitionFilter::T)),
        "J" => Some((Objective::Joint, PartitionFilter::All)),
        _ => None,
    }
}

impl Schedule {
    pub fn single(phase: Phase) -> Self {
        Self {
            phases: vec![phase],
        }
    }

    /// Parses `OBJ:PART:EPOCHS` phases joined by `->`, or a shorthand such
    /// as `A->T->J` whose phases split `max_epochs` equally (the remainder
    /// goes to the last phase).
    pub fn parse(spec: &str, max_epochs: usize) -> Result<Self> {
        let bad = |msg: String| TrainError::Config(format!("schedule {spec:?}: {msg}"));
        let normalized = spec.replace('→', "->");
        let parts: Vec<&str> = normalized.split("->").map(str::trim).collect();
        if normalized.trim().is_empty() || parts.iter().any(|p| p.is_empty()) {
            return Err(bad("empty phase".into()));
        }
        let short: Vec<_> = parts.iter().map(|p| shorthand(p)).collect();
        if short.iter().all(Option::is_some) {
            let n = parts.len();
            if max_epochs < n {
                return Err(bad(format!(
                    "max_epochs {max_epochs} is fewer than {n} phases"
                )));
            }
            let each = max_epochs / n;
            let phases = short
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    let (obj, part) = s.expect("checked");
                    let extra = if k + 1 == n { max_epochs % n } else { 0 };
                    Phase::new(obj, part, each + extra)
                })
                .collect();
            return Ok(Self { phases });
        }
        let mut phases = Vec::with_capacity(parts.len());
        for p in &parts {
            let fields: Vec<&str> = p.split(':').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(format!(
                    "phase {p:?} is neither a shorthand letter nor OBJ:PART:EPOCHS"
                )));
            }
            let obj = Objective::parse(fields[0])
                .ok_or_else(|| bad(format!("unknown objective {:?}", fields[0])))?;
            let part = parse_filter(fields[1])
                .ok_or_else(|| bad(format!("unknown partition {:?}", fields[1])))?;
            let epochs = fields[2]
                .parse()
                .map_err(|_| bad(format!("bad epoch count {:?}", fields[2])))?;
            phases.push(Phase::new(obj, part, epochs));
        }
        Ok(Self { phases })
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    pub fn needs_supervision(&self) -> bool {
        self.phases
            .iter()
            .any(|p| p.epochs > 0 && p.objective.needs_supervision())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shorthand_rows() {
        let j = Schedule::parse("J", 10).unwrap();
        assert_eq!(
            j.phases,
            vec![Phase::new(Objective::Joint, PartitionFilter::All, 10)]
        );
        let at = Schedule::parse("A->T", 10).unwrap();
        assert_eq!(
            at.phases,
            vec![
                Phase::new(Objective::Alignment, PartitionFilter::A, 5),
                Phase::new(Objective::Translation, PartitionFilter::T, 5)
            ]
        );
        let atj = Schedule::parse("A -> T -> J", 10).unwrap();
        assert_eq!(
            atj.phases.iter().map(|p| p.epochs).collect::<Vec<_>>(),
            vec![3, 3, 4]
        );
        assert_eq!(Schedule::parse("A→J", 4).unwrap().phases.len(), 2);
    }

    #[test]
    fn explicit_phases() {
        let s = Schedule::parse("ALIGN:A:2->JOINT:ALL:10", 0).unwrap();
        assert_eq!(
            s.phases,
            vec![
                Phase::new(Objective::Alignment, PartitionFilter::A, 2),
                Phase::new(Objective::Joint, PartitionFilter::All, 10)
            ]
        );
        assert_eq!(s.total_epochs(), 12);
        assert_eq!(s.to_string(), "ALIGN:A:2->JOINT:ALL:10");
        assert_eq!(Schedule::parse(&s.to_string(), 0).unwrap(), s);
        assert!(s.needs_supervision());
        assert!(!Schedule::parse("TRANS:ALL:3", 0)
            .unwrap()
            .needs_supervision());
    }

    #[test]
    fn rejects_bad_schedules() {
        for spec in [
            "",
            "  ",
            "J->",
            "X",
            "J->JOINT:ALL:3",
            "JOINT:ALL",
            "JOINT:B:3",
            "FOO:A:1",
            "JOINT:A:x",
        ] {
            assert!(Schedule::parse(spec, 10).is_err(), "{spec:?}");
        }
        assert!(Schedule::parse("A->T->J", 2).is_err());
    }
}
