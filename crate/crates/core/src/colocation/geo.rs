//! Spherical-earth geometry and nearest-footprint matching.

use std::fmt::Write as _;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ecef {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Ecef {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Surface position for a latitude and longitude in degrees.
pub fn to_ecef(lat: f64, lon: f64) -> Ecef {
    let (phi, lambda) = (lat.to_radians(), lon.to_radians());
    Ecef {
        x: EARTH_RADIUS_KM * phi.cos() * lambda.cos(),
        y: EARTH_RADIUS_KM * phi.cos() * lambda.sin(),
        z: EARTH_RADIUS_KM * phi.sin(),
    }
}

/// Great-circle angle between two vectors, `atan2(|u x v|, u . v)`.
pub fn angle(u: &Ecef, v: &Ecef) -> f64 {
    let cx = u.y * v.z - u.z * v.y;
    let cy = u.z * v.x - u.x * v.z;
    let cz = u.x * v.y - u.y * v.x;
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    let dot = u.x * v.x + u.y * v.y + u.z * v.z;
    cross.atan2(dot)
}

fn latitude(v: &Ecef) -> f64 {
    let n = v.norm();
    if n == 0.0 {
        return 0.0;
    }
    (v.z / n).clamp(-1.0, 1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub coarse: usize,
    pub fine: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchProduct {
    pub radius: f64,
    pub pairs: Vec<Pair>,
    pub unmatched: Vec<usize>,
}

impl MatchProduct {
    /// Canonical text: a `radius` line, then one line per fine index in order,
    /// `pair <coarse> <fine> <distance>` or `unmatched <fine>`.
    pub fn to_text(&self) -> String {
        let mut out = format!("radius {}\n", self.radius);
        let mut pairs = self.pairs.iter().peekable();
        let mut unmatched = self.unmatched.iter().peekable();
        loop {
            let next_pair = pairs.peek().map(|p| p.fine);
            let next_un = unmatched.peek().copied().copied();
            match (next_pair, next_un) {
                (Some(f), Some(u)) if u < f => {
                    writeln!(out, "unmatched {u}").unwrap();
                    unmatched.next();
                }
                (Some(_), _) => {
                    let p = pairs.next().unwrap();
                    writeln!(out, "pair {} {} {}", p.coarse, p.fine, p.distance).unwrap();
                }
                (None, Some(u)) => {
                    writeln!(out, "unmatched {u}").unwrap();
                    unmatched.next();
                }
                (None, None) => break,
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let radius = lines
            .next()
            .and_then(|l| l.strip_prefix("radius "))
            .ok_or("missing radius line")?
            .parse()
            .map_err(|e| format!("radius: {e}"))?;
        let mut product = MatchProduct {
            radius,
            pairs: Vec::new(),
            unmatched: Vec::new(),
        };
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{line:?}: {e}"));
            match parts.as_slice() {
                ["pair", c, f, d] => product.pairs.push(Pair {
                    coarse: num(c)?,
                    fine: num(f)?,
                    distance: d.parse().map_err(|e| format!("{line:?}: {e}"))?,
                }),
                ["unmatched", f] => product.unmatched.push(num(f)?),
                _ => return Err(format!("bad line {line:?}")),
            }
        }
        Ok(product)
    }
}

/// Assigns each fine sample to its angularly nearest coarse footprint within
/// `radius`, ties going to the lowest coarse index.
///
/// Coarse points are sorted by latitude so each fine point only measures the
/// band that could lie within `radius` of it.
pub fn match_footprints(fine: &[Ecef], coarse: &[Ecef], radius: f64) -> MatchProduct {
    assert!(radius > 0.0, "matching radius must be positive");
    let mut by_lat: Vec<(f64, usize)> = coarse.iter().enumerate().map(|(i, c)| (latitude(c), i)).collect();
    by_lat.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // widen the band slightly so rounding in the latitude never drops a candidate
    let band = radius + 1e-9;

    let mut product = MatchProduct {
        radius,
        pairs: Vec::new(),
        unmatched: Vec::new(),
    };
    for (fi, f) in fine.iter().enumerate() {
        let lat = latitude(f);
        let lo = by_lat.partition_point(|&(l, _)| l < lat - band);
        let mut best: Option<(f64, usize)> = None;
        for &(l, ci) in &by_lat[lo..] {
            if l > lat + band {
                break;
            }
            let d = angle(f, &coarse[ci]);
            if d > radius {
                continue;
            }
            best = match best {
                Some((bd, bi)) if bd < d || (bd == d && bi < ci) => Some((bd, bi)),
                _ => Some((d, ci)),
            };
        }
        match best {
            Some((distance, ci)) => product.pairs.push(Pair {
                coarse: ci,
                fine: fi,
                distance,
            }),
            None => product.unmatched.push(fi),
        }
    }
    product
}
