//! Deterministic moving-dot scenes.
//!
//! A Gaussian blob travels around a rectangular loop. Normal behaviour is a
//! clockwise lap at constant speed; the other segment kinds (stopping,
//! reversing, an inward detour) are the abnormal events, and the generator
//! labels every frame accordingly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::vae::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    LoopCw,
    LoopCcw,
    Stop,
    Detour,
}

impl Motion {
    pub fn is_abnormal(self) -> bool {
        self != Motion::LoopCw
    }

    pub fn name(self) -> &'static str {
        match self {
            Motion::LoopCw => "loop_cw",
            Motion::LoopCcw => "loop_ccw",
            Motion::Stop => "stop",
            Motion::Detour => "detour",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "loop_cw" => Motion::LoopCw,
            "loop_ccw" => Motion::LoopCcw,
            "stop" => Motion::Stop,
            "detour" => Motion::Detour,
            other => return Err(Error::invalid(format!("unknown motion {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub motion: Motion,
    pub frames: usize,
}

impl Segment {
    pub fn new(motion: Motion, frames: usize) -> Self {
        Self { motion, frames }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub width: usize,
    pub height: usize,
    pub segments: Vec<Segment>,
    /// Standard deviation of the rendered blob, in pixels.
    pub dot_radius: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Distance from the frame border to the loop, in pixels.
    pub margin: f64,
    /// Arc length travelled per frame, in pixels.
    pub speed: f64,
    /// Peak inward displacement of a detour, in pixels.
    pub detour_depth: f64,
    /// Arc length of the first frame.
    pub start: f64,
}

pub const PRESETS: [&str; 4] = ["train", "stop", "avoid", "uturn"];

impl ScenarioSpec {
    pub fn new(segments: Vec<Segment>, seed: u64) -> Self {
        Self {
            width: 16,
            height: 16,
            segments,
            dot_radius: 1.2,
            noise_sigma: 0.02,
            seed,
            margin: 4.0,
            speed: 0.5,
            detour_depth: 3.0,
            start: 0.0,
        }
    }

    /// Named scenarios: `train` is all-normal; `stop`, `avoid` and `uturn`
    /// embed one abnormal manoeuvre between normal laps.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        use Motion::*;
        let segments = match name {
            "train" => vec![Segment::new(LoopCw, 600)],
            "stop" => vec![
                Segment::new(LoopCw, 150),
                Segment::new(Stop, 40),
                Segment::new(LoopCw, 150),
            ],
            "avoid" | "detour" => vec![
                Segment::new(LoopCw, 150),
                Segment::new(Detour, 40),
                Segment::new(LoopCw, 150),
            ],
            "uturn" => vec![Segment::new(LoopCw, 150), Segment::new(LoopCcw, 150)],
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        Ok(Self::new(segments, seed))
    }

    pub fn total_frames(&self) -> usize {
        self.segments.iter().map(|s| s.frames).sum()
    }

    fn corners(&self) -> (f64, f64, f64, f64) {
        let x0 = self.margin;
        let y0 = self.margin;
        let x1 = self.width as f64 - 1.0 - self.margin;
        let y1 = self.height as f64 - 1.0 - self.margin;
        (x0, y0, x1, y1)
    }

    fn perimeter(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        2.0 * ((x1 - x0) + (y1 - y0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_frames() < 2 {
            return Err(Error::invalid("scenario needs at least two frames"));
        }
        if self.segments.iter().any(|s| s.frames == 0) {
            return Err(Error::invalid("scenario segments must be non-empty"));
        }
        if !(self.speed > 0.0 && self.dot_radius > 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("speed and dot radius must be positive, noise non-negative"));
        }
        let (x0, y0, x1, y1) = self.corners();
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::invalid("loop margin leaves no room for a loop"));
        }
        // The blob must stay inside the frame along the loop; a detour only
        // moves inward so it cannot leave if the loop does not.
        if self.margin < self.dot_radius {
            return Err(Error::invalid(format!(
                "dot of radius {} leaves the {}x{} frame with margin {}",
                self.dot_radius, self.width, self.height, self.margin
            )));
        }
        let half_min = 0.5 * (x1 - x0).min(y1 - y0);
        if self.detour_depth < 0.0 || self.detour_depth > half_min {
            return Err(Error::invalid("detour depth must lie within the loop"));
        }
        Ok(())
    }

    /// Point on the loop at arc length `s`, clockwise on screen (x right,
    /// y down) starting from the top-left corner.
    pub fn loop_point(&self, s: f64) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.corners();
        let w = x1 - x0;
        let h = y1 - y0;
        let s = s.rem_euclid(self.perimeter());
        if s < w {
            (x0 + s, y0)
        } else if s < w + h {
            (x1, y0 + (s - w))
        } else if s < 2.0 * w + h {
            (x1 - (s - w - h), y1)
        } else {
            (x0, y1 - (s - 2.0 * w - h))
        }
    }

    fn center(&self) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.corners();
        (0.5 * (x0 + x1), 0.5 * (y0 + y1))
    }

    /// Dot centre of every frame.
    pub fn trajectory(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.total_frames());
        let mut s = self.start;
        let mut first = true;
        for seg in &self.segments {
            for j in 0..seg.frames {
                if !first {
                    match seg.motion {
                        Motion::LoopCw | Motion::Detour => s += self.speed,
                        Motion::LoopCcw => s -= self.speed,
                        Motion::Stop => {}
                    }
                }
                first = false;
                let (px, py) = self.loop_point(s);
                let pos = if seg.motion == Motion::Detour {
                    // triangular inward excursion, zero just outside the segment
                    let m = seg.frames as f64 + 1.0;
                    let t = (j + 1) as f64;
                    let depth = self.detour_depth * (1.0 - (2.0 * t / m - 1.0).abs());
                    let (cx, cy) = self.center();
                    let (dx, dy) = (cx - px, cy - py);
                    let norm = (dx * dx + dy * dy).sqrt();
                    if norm > 0.0 {
                        (px + depth * dx / norm, py + depth * dy / norm)
                    } else {
                        (px, py)
                    }
                } else {
                    (px, py)
                };
                out.push(pos);
            }
        }
        out
    }

    pub fn labels(&self) -> Vec<bool> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.motion.is_abnormal(), s.frames))
            .collect()
    }
}

/// Frames plus per-frame abnormal flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: Vec<Frame>,
    pub labels: Vec<bool>,
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let inv = 1.0 / (2.0 * spec.dot_radius * spec.dot_radius);
    let frames = spec
        .trajectory()
        .into_iter()
        .map(|(px, py)| {
            let mut pixels = Vec::with_capacity(spec.width * spec.height);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    let mut v = (-d2 * inv).exp();
                    if spec.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    // stored as f32 on disk, so keep in-memory frames identical
                    pixels.push(v.clamp(0.0, 1.0) as f32 as f64);
                }
            }
            Frame::new(spec.width, spec.height, pixels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        frames,
        labels: spec.labels(),
    })
}
