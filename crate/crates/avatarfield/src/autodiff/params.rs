//! Flat f64 parameter vector with named, non-overlapping segments and
//! deterministic seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AvatarError, Result};

/// Slice of the flat parameter vector. Copyable handle used by tape ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Initialization scheme for a segment.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform in +-bound.
    Uniform { bound: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    data: Vec<f64>,
    segments: Vec<SegmentEntry>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            data: Vec::new(),
            segments: Vec::new(),
            seed,
        }
    }

    /// Registers a segment and initializes it. Registration order is part of
    /// the layout, so callers must register in a fixed order.
    pub fn register(&mut self, name: &str, len: usize, init: Init) -> Segment {
        assert!(
            !self.segments.iter().any(|s| s.name == name),
            "duplicate segment name {name}"
        );
        let offset = self.data.len();
        // Per-segment rng stream keyed by seed and registration index, so one
        // segment's size cannot perturb another's initial values.
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (self.segments.len() as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
        let vals: Vec<f64> = match init {
            Init::Zeros => vec![0.0; len],
            Init::Const(c) => vec![c; len],
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform { bound } => (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
        };
        self.data.extend_from_slice(&vals);
        self.segments.push(SegmentEntry {
            name: name.to_string(),
            offset,
            len,
        });
        Segment { offset, len }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[SegmentEntry] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<Segment> {
        self.segments.iter().find(|s| s.name == name).map(|s| Segment {
            offset: s.offset,
            len: s.len,
        })
    }

    pub fn get(&self, seg: Segment) -> &[f64] {
        &self.data[seg.offset..seg.offset + seg.len]
    }

    pub fn get_mut(&mut self, seg: Segment) -> &mut [f64] {
        &mut self.data[seg.offset..seg.offset + seg.len]
    }

    /// Replaces the full parameter vector; layout must match.
    pub fn restore(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(AvatarError::validation(format!(
                "parameter blob length {} does not match layout {}",
                data.len(),
                self.data.len()
            )));
        }
        self.data = data;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_are_disjoint_and_cover_vector() {
        let mut p = ParamStore::new(7);
        p.register("a", 10, Init::Xavier { fan_in: 5, fan_out: 2 });
        p.register("b", 3, Init::Zeros);
        p.register("c", 4, Init::Const(1.5));
        let mut covered = 0;
        for s in p.segments() {
            assert_eq!(s.offset, covered);
            covered += s.len;
        }
        assert_eq!(covered, p.len());
        assert!(p.get(p.segment("c").unwrap()).iter().all(|&v| v == 1.5));
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let mk = || {
            let mut p = ParamStore::new(42);
            p.register("w", 64, Init::Xavier { fan_in: 8, fan_out: 8 });
            p.register("u", 16, Init::Uniform { bound: 1e-4 });
            p
        };
        assert_eq!(mk().data(), mk().data());
        let mut other = ParamStore::new(43);
        other.register("w", 64, Init::Xavier { fan_in: 8, fan_out: 8 });
        assert_ne!(mk().data()[..64], *other.data());
    }

    #[test]
    fn xavier_bound_holds() {
        let mut p = ParamStore::new(1);
        let seg = p.register("w", 1000, Init::Xavier { fan_in: 30, fan_out: 10 });
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(p.get(seg).iter().all(|v| v.abs() <= bound));
    }
}
