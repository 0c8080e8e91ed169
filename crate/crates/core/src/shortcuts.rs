//! Class-correlated markers stamped into pixel-space images.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{accuracy, Classifier};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShortcutKind {
    None,
    /// Class-colored solid square at a random position.
    Pattern,
    /// Uniform noise square at a class-specific fixed position.
    Location,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutSpec {
    pub kind: ShortcutKind,
    pub marker_size: usize,
    /// One RGB color per class.
    pub pattern_table: Vec<[f32; 3]>,
    /// One `(row, col)` top-left anchor per class.
    pub location_table: Vec<(usize, usize)>,
    pub noise_seed: u64,
}

impl ShortcutSpec {
    pub fn none() -> Self {
        ShortcutSpec {
            kind: ShortcutKind::None,
            marker_size: 0,
            pattern_table: Vec::new(),
            location_table: Vec::new(),
            noise_seed: 0,
        }
    }

    /// Default palette and border anchors for `num_classes` classes on a
    /// `resolution x resolution` image.
    pub fn new(kind: ShortcutKind, num_classes: usize, resolution: usize, marker_size: usize, noise_seed: u64) -> Result<Self> {
        if kind == ShortcutKind::None {
            return Ok(Self::none());
        }
        let spec = ShortcutSpec {
            kind,
            marker_size,
            pattern_table: palette(num_classes),
            location_table: border_anchors(num_classes, resolution, marker_size)?,
            noise_seed,
        };
        spec.validate(num_classes, resolution)?;
        Ok(spec)
    }

    pub fn validate(&self, num_classes: usize, resolution: usize) -> Result<()> {
        if self.kind == ShortcutKind::None {
            return Ok(());
        }
        let m = self.marker_size;
        if m == 0 || m > resolution {
            return Err(Error::config(format!("marker of size {m} does not fit a {resolution}px image")));
        }
        if self.pattern_table.len() != num_classes || self.location_table.len() != num_classes {
            return Err(Error::config(format!("shortcut tables need one entry per class ({num_classes})")));
        }
        for (a, ca) in self.pattern_table.iter().enumerate() {
            if ca.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("marker colors must lie in [0, 1]"));
            }
            if self.pattern_table[..a].contains(ca) {
                return Err(Error::config("marker colors must be pairwise distinct"));
            }
        }
        for (a, &(r, c)) in self.location_table.iter().enumerate() {
            if r + m > resolution || c + m > resolution {
                return Err(Error::config(format!("marker anchor ({r}, {c}) out of bounds")));
            }
            if self.location_table[..a].contains(&(r, c)) {
                return Err(Error::config("marker anchors must be pairwise distinct"));
            }
        }
        Ok(())
    }

    pub fn stamps_pattern(&self) -> bool {
        matches!(self.kind, ShortcutKind::Pattern | ShortcutKind::Combined)
    }

    pub fn stamps_location(&self) -> bool {
        matches!(self.kind, ShortcutKind::Location | ShortcutKind::Combined)
    }
}

/// Farthest-point selection over a 6-level RGB lattice, seeded at black.
pub fn palette(n: usize) -> Vec<[f32; 3]> {
    const LEVELS: usize = 6;
    let lattice: Vec<[f32; 3]> = (0..LEVELS * LEVELS * LEVELS)
        .map(|i| {
            let q = |v: usize| v as f32 / (LEVELS - 1) as f32;
            [q(i / (LEVELS * LEVELS)), q((i / LEVELS) % LEVELS), q(i % LEVELS)]
        })
        .collect();
    let dist = |a: &[f32; 3], b: &[f32; 3]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>();
    let mut chosen: Vec<[f32; 3]> = Vec::with_capacity(n);
    let mut min_d = alloc::vec![f32::INFINITY; lattice.len()];
    let mut next = 0;
    while chosen.len() < n.min(lattice.len()) {
        let c = lattice[next];
        chosen.push(c);
        for (d, p) in min_d.iter_mut().zip(&lattice) {
            *d = d.min(dist(p, &c));
        }
        // first index wins ties, which keeps the palette deterministic
        next = (0..lattice.len()).fold(0, |best, i| if min_d[i] > min_d[best] { i } else { best });
    }
    chosen
}

/// Non-overlapping slots on the image border, visited clockwise from the top
/// left, then `n` of them picked at even spacing.
pub fn border_anchors(n: usize, resolution: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    if m == 0 || 2 * m > resolution {
        return Err(Error::config(format!("marker size {m} leaves no border slots at {resolution}px")));
    }
    let per_row = resolution / m;
    let last = resolution - m;
    let mut slots = Vec::new();
    for k in 0..per_row {
        slots.push((0, k * m));
    }
    let side: Vec<usize> = (1..per_row).map(|k| k * m).filter(|&r| r + m <= last).collect();
    for &r in &side {
        slots.push((r, last));
    }
    for k in (0..per_row).rev() {
        slots.push((last, k * m));
    }
    for &r in side.iter().rev() {
        slots.push((r, 0));
    }
    if slots.len() < n {
        return Err(Error::config(format!(
            "only {} non-overlapping {m}px border slots at {resolution}px, need {n}",
            slots.len()
        )));
    }
    Ok((0..n).map(|i| slots[i * slots.len() / n]).collect())
}

/// Stamps markers in pixel space. Pixels outside the stamped squares are
/// untouched; `rng` drives pattern positions and noise values.
pub fn apply_shortcut<R: Rng>(pixels: &Tensor, labels: &[usize], spec: &ShortcutSpec, rng: &mut R) -> Result<Tensor> {
    let [n, c, h, w] = pixels.shape();
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    if spec.kind == ShortcutKind::None {
        return Ok(pixels.clone());
    }
    if h != w {
        return Err(Error::config("shortcuts need square images"));
    }
    spec.validate(spec.pattern_table.len(), h)?;
    if c != 3 && spec.stamps_pattern() {
        return Err(Error::config("pattern markers need RGB images"));
    }
    let m = spec.marker_size;
    let mut out = pixels.clone();
    for (s, &y) in labels.iter().enumerate() {
        if y >= spec.pattern_table.len() {
            return Err(Error::Label {
                label: y,
                num_classes: spec.pattern_table.len(),
            });
        }
        if spec.stamps_pattern() {
            let r0 = rng.random_range(0..=h - m);
            let c0 = rng.random_range(0..=w - m);
            let color = spec.pattern_table[y];
            for ch in 0..c {
                for r in r0..r0 + m {
                    for col in c0..c0 + m {
                        out[[s, ch, r, col]] = color[ch];
                    }
                }
            }
        }
        if spec.stamps_location() {
            let (r0, c0) = spec.location_table[y];
            for ch in 0..c {
                for r in r0..r0 + m {
                    for col in c0..c0 + m {
                        out[[s, ch, r, col]] = rng.random::<f32>();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Clean and shortcut-stamped accuracy on `data` (pixel space).
pub fn shortcut_gap<M: Classifier + ?Sized>(
    model: &mut M,
    data: &Dataset,
    norm: &Normalization,
    spec: &ShortcutSpec,
    batch: usize,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let clean = accuracy(model, data, norm, None, batch, &mut rng)?;
    if spec.kind == ShortcutKind::None {
        return Ok((clean, clean));
    }
    let mut correct = 0usize;
    for idx in data.batches::<ChaCha8Rng>(batch, None) {
        let (pixels, labels) = data.batch(&idx);
        let stamped = apply_shortcut(&pixels, &labels, spec, &mut rng)?;
        let pred = model.logits(&norm.normalize(&stamped), BnMode::Running)?.argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((clean, correct as f64 / data.len().max(1) as f64))
}
