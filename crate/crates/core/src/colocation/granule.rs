//! Synthetic instrument granules and their canonical text form.
//!
//! ```text
//! granule <id>
//! instrument fine|coarse
//! sample <lat> <lon> <value>
//! ...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so text produced on any
//! node parses back to the same bits.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instrument {
    Fine,
    Coarse,
}

impl Instrument {
    pub fn as_str(&self) -> &'static str {
        match self {
            Instrument::Fine => "fine",
            Instrument::Coarse => "coarse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub lat: f64,
    pub lon: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Granule {
    pub granule_id: String,
    pub instrument: Instrument,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GranuleError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("granule has no samples")]
    Empty,
    #[error("sample {0} out of range")]
    OutOfRange(usize),
}

/// Sampling window of the synthetic scene, in degrees.
const LAT_RANGE: (f64, f64) = (-10.0, 10.0);
const LON_RANGE: (f64, f64) = (-10.0, 10.0);
const VALUE_RANGE: (f64, f64) = (200.0, 320.0);

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            lat: rng.gen_range(LAT_RANGE.0..=LAT_RANGE.1),
            lon: rng.gen_range(LON_RANGE.0..=LON_RANGE.1),
            value: rng.gen_range(VALUE_RANGE.0..=VALUE_RANGE.1),
        })
        .collect()
}

/// Deterministic fine and coarse granules for `seed`. Panics on a zero count.
pub fn gen_granules(seed: u64, n_fine: usize, n_coarse: usize) -> (Granule, Granule) {
    assert!(n_fine >= 1 && n_coarse >= 1, "granules need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = draw(&mut rng, n_fine);
    let coarse = draw(&mut rng, n_coarse);
    (
        Granule {
            granule_id: format!("fine-{seed}"),
            instrument: Instrument::Fine,
            samples: fine,
        },
        Granule {
            granule_id: format!("coarse-{seed}"),
            instrument: Instrument::Coarse,
            samples: coarse,
        },
    )
}

impl Granule {
    pub fn to_text(&self) -> String {
        let mut out = format!("granule {}\ninstrument {}\n", self.granule_id, self.instrument.as_str());
        for s in &self.samples {
            writeln!(out, "sample {} {} {}", s.lat, s.lon, s.value).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GranuleError> {
        let err = |line: usize, reason: &str| GranuleError::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let granule_id = match lines.next() {
            Some((_, l)) => l.strip_prefix("granule ").ok_or_else(|| err(1, "expected granule"))?,
            None => return Err(err(1, "empty")),
        };
        let instrument = match lines.next().map(|(_, l)| l) {
            Some("instrument fine") => Instrument::Fine,
            Some("instrument coarse") => Instrument::Coarse,
            _ => return Err(err(2, "expected instrument fine|coarse")),
        };
        let mut samples = Vec::new();
        for (n, line) in lines {
            let rest = line.strip_prefix("sample ").ok_or_else(|| err(n, "expected sample"))?;
            let nums: Vec<f64> = rest
                .split(' ')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| err(n, "bad number"))?;
            let [lat, lon, value] = nums[..] else {
                return Err(err(n, "expected three numbers"));
            };
            samples.push(Sample { lat, lon, value });
        }
        let g = Granule {
            granule_id: granule_id.to_string(),
            instrument,
            samples,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GranuleError> {
        if self.samples.is_empty() {
            return Err(GranuleError::Empty);
        }
        for (i, s) in self.samples.iter().enumerate() {
            let ok = (-90.0..=90.0).contains(&s.lat) && s.lon > -180.0 && s.lon <= 180.0 && s.value.is_finite();
            if !ok {
                return Err(GranuleError::OutOfRange(i));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(gen_granules(7, 10, 3), gen_granules(7, 10, 3));
        assert_ne!(gen_granules(7, 10, 3), gen_granules(8, 10, 3));
    }

    #[test]
    #[should_panic]
    fn zero_fine_rejected() {
        gen_granules(1, 0, 3);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let (fine, coarse) = gen_granules(11, 50, 5);
        for g in [fine, coarse] {
            let back = Granule::parse(&g.to_text()).unwrap();
            for (a, b) in g.samples.iter().zip(&back.samples) {
                assert_eq!(a.lat.to_bits(), b.lat.to_bits());
                assert_eq!(a.lon.to_bits(), b.lon.to_bits());
                assert_eq!(a.value.to_bits(), b.value.to_bits());
            }
            assert_eq!(back.to_text(), g.to_text());
        }
    }

    #[test]
    fn rejects_bad_text() {
        assert!(Granule::parse("granule x\ninstrument fine\n").is_err());
        assert!(Granule::parse("granule x\ninstrument fine\nsample 91 0 1\n").is_err());
        assert!(Granule::parse("granule x\ninstrument wide\nsample 1 0 1\n").is_err());
    }
}
