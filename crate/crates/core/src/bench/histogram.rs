//! Energies of stored, distorted-stored and non-stored patterns after a write.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::sweep::eval_setup;
use super::{streams, BenchError, Checkpoint, ExperimentConfig, Result, Table};
use crate::distort::DistortionSpec;
use crate::patterns::PatternBatch;
use crate::util::sub_rng;
use crate::writer::Writer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternClass {
    Stored,
    Distorted,
    Other,
}

impl PatternClass {
    pub fn name(self) -> &'static str {
        match self {
            PatternClass::Stored => "stored",
            PatternClass::Distorted => "distorted",
            PatternClass::Other => "other",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub batch: u64,
    pub class: PatternClass,
    pub energy: f64,
}

/// Write `written` into the checkpoint's prior, then evaluate the energy of
/// each written pattern, one distorted copy of each, and each of `other`.
/// Patterns are given in their own domain; the model sees unit-box values.
pub fn energy_histogram(
    ck: &Checkpoint,
    written: &PatternBatch,
    other: &PatternBatch,
    spec: &DistortionSpec,
    batch: u64,
    precision: crate::tape::Precision,
    rng: &mut dyn RngCore,
) -> Result<Vec<EnergySample>> {
    let model = ck.model();
    let d = model.dim();
    for p in [written, other] {
        if !p.is_empty() && p.dim() != d {
            return Err(BenchError::CheckpointDim { expected: p.dim(), got: d });
        }
    }
    if written.is_empty() && other.is_empty() {
        return Ok(Vec::new());
    }
    let s = &ck.state;
    let theta = if written.is_empty() {
        s.params.clone()
    } else {
        let unit = written.to_unit_box();
        let w = Writer::new(&model, &s.params, unit.len(), &s.write)?;
        w.write(&unit, &s.params, &s.write, precision)?.0
    };
    let mut out = Vec::with_capacity(2 * written.len() + other.len());
    let mut push = |class, x: &[f64]| -> Result<()> {
        let energy = model.energy(x, &theta, precision)?;
        out.push(EnergySample { batch, class, energy });
        Ok(())
    };
    let unit = written.to_unit_box();
    for x in unit.rows() {
        push(PatternClass::Stored, x)?;
    }
    if !written.is_empty() {
        let mut rows = Vec::with_capacity(written.len());
        for x in written.rows() {
            rows.push(spec.distort(x, written.domain(), rng)?.0);
        }
        let distorted = PatternBatch::from_rows(written.domain(), &rows).map_err(crate::metatrain::MetaError::from)?;
        for x in distorted.to_unit_box().rows() {
            push(PatternClass::Distorted, x)?;
        }
    }
    if !other.is_empty() {
        for x in other.to_unit_box().rows() {
            push(PatternClass::Other, x)?;
        }
    }
    Ok(out)
}

/// Per-batch class means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMeans {
    pub batch: u64,
    pub stored: f64,
    pub distorted: f64,
    pub other: f64,
}

impl BatchMeans {
    /// Stored patterns sit strictly below both other classes.
    pub fn separated(&self) -> bool {
        self.stored < self.distorted && self.stored < self.other
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub samples: Vec<EnergySample>,
    pub batches: Vec<BatchMeans>,
}

impl Histogram {
    /// Fraction of batches with stored energies below both other classes.
    pub fn separation(&self) -> f64 {
        if self.batches.is_empty() {
            return f64::NAN;
        }
        self.batches.iter().filter(|b| b.separated()).count() as f64 / self.batches.len() as f64
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["batch", "class", "energy"].map(String::from).to_vec());
        for s in &self.samples {
            t.push(vec![s.batch.to_string(), s.class.name().to_string(), format!("{:e}", s.energy)]);
        }
        t
    }
}

fn class_mean(samples: &[EnergySample], class: PatternClass) -> f64 {
    let v: Vec<f64> = samples.iter().filter(|s| s.class == class).map(|s| s.energy).collect();
    super::metrics::mean(&v)
}

/// `cfg.trials` seeded batches: each writes a fresh batch and compares it
/// with the same number of unwritten patterns.
pub fn run_energy_hist(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Histogram> {
    let dim = ck.state.arch.dim();
    let (batch, spec, _) = eval_setup(cfg, ck);
    let mut source = cfg.source(dim)?;
    spec.validate(dim, source.domain())?;
    let stream = streams::of(streams::HIST, batch);
    let mut samples = Vec::new();
    let mut batches = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials as u64 {
        let mut rng = sub_rng(cfg.seed, stream, t);
        let both = source.sample(2 * batch, &mut rng)?;
        let idx: Vec<usize> = (0..2 * batch).collect();
        let written = both.select(&idx[..batch]);
        let other = both.select(&idx[batch..]);
        let s = energy_histogram(ck, &written, &other, &spec, t, cfg.precision, &mut rng)?;
        batches.push(BatchMeans {
            batch: t,
            stored: class_mean(&s, PatternClass::Stored),
            distorted: class_mean(&s, PatternClass::Distorted),
            other: class_mean(&s, PatternClass::Other),
        });
        samples.extend(s);
    }
    Ok(Histogram { samples, batches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyArch;
    use crate::metatrain::MetaState;
    use crate::patterns::Domain;
    use crate::tape::Precision;

    fn ck() -> Checkpoint {
        let arch = EnergyArch::GatedRnn { dim: 8, hidden: 8, hops: 2, dynamic: 3 };
        Checkpoint::new(MetaState::init(&arch, 2, 2, 0).unwrap(), None)
    }

    #[test]
    fn empty_lists_give_no_samples() {
        let empty = PatternBatch::new(Domain::Bipolar, 8, vec![]).unwrap();
        let mut rng = sub_rng(0, 0, 0);
        let s = energy_histogram(&ck(), &empty, &empty, &DistortionSpec::flip(2), 0, Precision::F64, &mut rng).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn energies_are_finite_and_labelled() {
        let mut rng = sub_rng(0, 0, 0);
        let w = PatternBatch::random_bipolar(3, 8, &mut rng);
        let o = PatternBatch::random_bipolar(2, 8, &mut rng);
        let s = energy_histogram(&ck(), &w, &o, &DistortionSpec::flip(2), 0, Precision::F64, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|e| e.energy.is_finite()));
        assert_eq!(s.iter().filter(|e| e.class == PatternClass::Distorted).count(), 3);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = sub_rng(0, 0, 0);
        let w = PatternBatch::random_bipolar(3, 5, &mut rng);
        let r = energy_histogram(&ck(), &w, &w, &DistortionSpec::flip(2), 0, Precision::F64, &mut rng);
        assert!(matches!(r, Err(BenchError::CheckpointDim { .. })));
    }
}
