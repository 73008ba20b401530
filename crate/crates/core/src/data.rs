//! Synthetic multi-domain live/spoof benchmark.
//!
//! Every sample is a radial "face" on a textured background. Live faces are
//! shaded by their depth bump; spoof faces have the shading flattened and a
//! periodic grid printed over the frame. Domains differ in colour gain and
//! bias, blur, background texture frequency and the grid of their spoofs.
//!
//! Image and depth values are rounded to `f32` at generation time so the
//! dataset file round-trips bit-exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{config_err, shape_err, AmelError, Result};
use crate::model::LIVE_CLASS;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "AMELDS1";
pub const DATASET_VERSION: u32 = 1;
pub const SPOOF: u8 = 0;
pub const LIVE: u8 = 1;

const FLATTENED_SHADING: f64 = 0.3;
const NOISE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub blur_radius: usize,
    /// Background stripe frequency in cycles per image width.
    pub texture_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofArtifact {
    /// Grid period in pixels.
    pub period: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub style: Style,
    pub spoof_artifact: SpoofArtifact,
    pub rng_seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.style.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(config_err("style.gain", "gains must be > 0"));
        }
        if !(self.style.texture_freq >= 0.0) {
            return Err(config_err("style.texture_freq", "must be >= 0"));
        }
        if !(self.spoof_artifact.period > 0.0) {
            return Err(config_err("spoof_artifact.period", "must be > 0"));
        }
        if !(self.spoof_artifact.amplitude >= 0.0) {
            return Err(config_err("spoof_artifact.amplitude", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub image_hw: usize,
    pub depth_hw: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            image_hw: 32,
            depth_hw: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub label: u8,
    /// `[1, d, d]`: a bump peaking at exactly 1 for live, zeros for spoof.
    pub depth: Tensor,
    pub domain_id: usize,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn box_blur(plane: &[f64], hw: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return plane.to_vec();
    }
    let r = radius as i64;
    let mut out = vec![0.0; plane.len()];
    for y in 0..hw as i64 {
        for x in 0..hw as i64 {
            let (mut acc, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < hw as i64 && xx < hw as i64 {
                        acc += plane[(yy as usize) * hw + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[(y as usize) * hw + x as usize] = acc / n;
        }
    }
    out
}

fn generate_one(spec: &DomainSpec, live: bool, geom: Geometry, rng: &mut ChaCha8Rng) -> Sample {
    let hw = geom.image_hw;
    let s = hw as f64;
    // face placement and appearance, in units of the image width
    let cx = rng.gen_range(0.4..0.6);
    let cy = rng.gen_range(0.4..0.6);
    let radius = rng.gen_range(0.28..0.38);
    let tone = rng.gen_range(0.4..0.55);
    let tint = [1.0, rng.gen_range(0.8..0.95), rng.gen_range(0.65..0.85)];
    let bg = rng.gen_range(0.2..0.3);
    let angle = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let grid_phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));

    let sigma = radius / 2.0;
    let bump = |u: f64, v: f64| (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
    let shading = if live { 1.0 } else { FLATTENED_SHADING };
    let art = &spec.spoof_artifact;
    let freq = spec.style.texture_freq;

    let mut lum = vec![0.0; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let r2 = ((u - cx).powi(2) + (v - cy).powi(2)) / (radius * radius);
            let face = (1.0 - r2).clamp(0.0, 1.0).sqrt();
            let texture = 0.08 * (2.0 * PI * freq * (u * angle.cos() + v * angle.sin()) + phase).sin();
            // light from the upper left: brightness follows depth and its slope
            let z = bump(u, v);
            let lit = 0.35 * z + 0.6 * z * ((cx - u) + (cy - v));
            let mut l = if face > 0.0 {
                tone + shading * lit
            } else {
                bg + texture
            };
            if !live {
                let gx = (2.0 * PI * x as f64 / art.period + grid_phase.0).cos();
                let gy = (2.0 * PI * y as f64 / art.period + grid_phase.1).cos();
                l += art.amplitude * 0.5 * (gx + gy);
            }
            lum[y * hw + x] = l;
        }
    }

    let mut image = Vec::with_capacity(3 * hw * hw);
    for c in 0..3 {
        let plane: Vec<f64> = lum
            .iter()
            .map(|&l| spec.style.gain[c] * l * tint[c] + spec.style.bias[c])
            .collect();
        let plane = box_blur(&plane, hw, spec.style.blur_radius);
        image.extend(
            plane
                .into_iter()
                .map(|v| f32_round((v + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 1.0))),
        );
    }

    let d = geom.depth_hw;
    let depth = if live {
        let raw: Vec<f64> = (0..d * d)
            .map(|i| bump(((i % d) as f64 + 0.5) / d as f64, ((i / d) as f64 + 0.5) / d as f64))
            .map(f32_round)
            .collect();
        let peak = raw.iter().cloned().fold(0.0, f64::max);
        raw.into_iter().map(|v| f32_round(v / peak)).collect()
    } else {
        vec![0.0; d * d]
    };

    Sample {
        image: Tensor::new(&[3, hw, hw], image).expect("sized"),
        label: if live { LIVE } else { SPOOF },
        depth: Tensor::new(&[1, d, d], depth).expect("sized"),
        domain_id: spec.domain_id,
    }
}

/// Deterministic in `spec`: live samples first, then spoof samples.
pub fn generate_domain(spec: &DomainSpec, n_live: usize, n_spoof: usize, geom: Geometry) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut out = Vec::with_capacity(n_live + n_spoof);
    for i in 0..n_live + n_spoof {
        out.push(generate_one(spec, i < n_live, geom, &mut rng));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

impl DomainData {
    pub fn generate(spec: DomainSpec, n_live: usize, n_spoof: usize, geom: Geometry) -> Self {
        let samples = generate_domain(&spec, n_live, n_spoof, geom);
        Self { spec, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `b` distinct samples drawn uniformly.
    pub fn sample_batch<R: Rng + ?Sized>(&self, domain: usize, b: usize, rng: &mut R) -> Result<Batch> {
        if b > self.samples.len() {
            return Err(config_err(
                "batch_per_domain",
                format!("{} exceeds domain size {}", b, self.samples.len()),
            ));
        }
        let picks: Vec<&Sample> = index::sample(rng, self.samples.len(), b)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect();
        Batch::from_samples(domain, &picks)
    }
}

/// `B` samples of one domain stacked for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Index of the expert this batch belongs to.
    pub domain: usize,
    pub images: Tensor,
    /// Class indices; `1` is live.
    pub labels: Vec<usize>,
    pub depth: Tensor,
}

impl Batch {
    pub fn from_samples(domain: usize, samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| shape_err("batch", "no samples"))?;
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let depths: Vec<&Tensor> = samples.iter().map(|s| &s.depth).collect();
        let mut ishape = vec![samples.len()];
        ishape.extend_from_slice(first.image.shape());
        let mut dshape = vec![samples.len()];
        dshape.extend_from_slice(first.depth.shape());
        let images = Tensor::new(&ishape, images.iter().flat_map(|t| t.data().iter().copied()).collect())?;
        let depth = Tensor::new(&dshape, depths.iter().flat_map(|t| t.data().iter().copied()).collect())?;
        Ok(Self {
            domain,
            images,
            labels: samples.iter().map(|s| s.label as usize).collect(),
            depth,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Target domain derived from one source by a perturbation of size `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRelevanceKnob {
    pub source: usize,
    pub delta: f64,
    /// Added to the source seed; zero replays the source's exact samples.
    pub seed_offset: u64,
}

impl Default for DomainRelevanceKnob {
    fn default() -> Self {
        Self {
            source: 0,
            delta: 0.1,
            seed_offset: 1_000_003,
        }
    }
}

impl DomainRelevanceKnob {
    /// Every continuous style and artifact field is scaled by `1 + delta*u`
    /// with `u` uniform in `[-1, 1]` and drawn from `perturb_seed`.
    pub fn target_spec(&self, source: &DomainSpec, target_id: usize, perturb_seed: u64) -> Result<DomainSpec> {
        if !(self.delta >= 0.0) {
            return Err(config_err("relevance.delta", "must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(perturb_seed);
        let mut jitter = |v: f64| v * (1.0 + self.delta * rng.gen_range(-1.0..=1.0));
        let mut spec = source.clone();
        spec.domain_id = target_id;
        spec.rng_seed = source.rng_seed.wrapping_add(self.seed_offset);
        for c in 0..3 {
            spec.style.gain[c] = jitter(spec.style.gain[c]);
            spec.style.bias[c] = jitter(spec.style.bias[c]);
        }
        spec.style.texture_freq = jitter(spec.style.texture_freq);
        spec.spoof_artifact.period = jitter(spec.spoof_artifact.period);
        spec.spoof_artifact.amplitude = jitter(spec.spoof_artifact.amplitude);
        spec.validate()?;
        Ok(spec)
    }
}

/// Source domain `k` of the default benchmark.
pub fn default_source_spec(k: usize, seed: u64) -> DomainSpec {
    const GAINS: [[f64; 3]; 4] = [
        [1.35, 0.85, 0.6],
        [0.6, 1.3, 0.9],
        [0.85, 0.6, 1.4],
        [1.1, 1.1, 1.1],
    ];
    const BIASES: [[f64; 3]; 4] = [
        [0.1, 0.0, 0.2],
        [0.0, 0.1, 0.0],
        [0.05, 0.25, 0.1],
        [0.0, 0.0, 0.0],
    ];
    const PERIODS: [f64; 4] = [3.0, 4.0, 6.0, 5.0];
    DomainSpec {
        domain_id: k,
        style: Style {
            gain: GAINS[k % 4],
            bias: BIASES[k % 4],
            blur_radius: k % 2,
            texture_freq: 2.0 + 3.0 * (k % 4) as f64,
        },
        spoof_artifact: SpoofArtifact {
            period: PERIODS[k % 4],
            amplitude: 0.05,
        },
        rng_seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub num_sources: usize,
    pub n_live: usize,
    pub n_spoof: usize,
    pub target_live: usize,
    pub target_spoof: usize,
    pub geometry: Geometry,
    pub relevance: DomainRelevanceKnob,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            num_sources: 3,
            n_live: 1000,
            n_spoof: 1000,
            target_live: 1000,
            target_spoof: 1000,
            geometry: Geometry::default(),
            relevance: DomainRelevanceKnob::default(),
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sources == 0 {
            return Err(config_err("num_sources", "must be >= 1"));
        }
        if self.relevance.source >= self.num_sources {
            return Err(config_err(
                "relevance.source",
                format!("{} is not a source index (< {})", self.relevance.source, self.num_sources),
            ));
        }
        if self.geometry.image_hw == 0 || self.geometry.depth_hw == 0 {
            return Err(config_err("geometry", "sizes must be >= 1"));
        }
        Ok(())
    }
}

/// Sources plus a held-out target; the target is the last domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: Geometry,
    pub domains: Vec<DomainData>,
    pub target: Option<usize>,
}

impl Dataset {
    pub fn sources(&self) -> Vec<&DomainData> {
        self.domains
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != self.target)
            .map(|(_, d)| d)
            .collect()
    }

    pub fn target_domain(&self) -> Option<&DomainData> {
        self.target.map(|t| &self.domains[t])
    }
}

pub fn make_benchmark(config: &BenchmarkConfig) -> Result<Dataset> {
    config.validate()?;
    let g = config.geometry;
    let mut domains: Vec<DomainData> = (0..config.num_sources)
        .map(|k| {
            let spec = default_source_spec(k, config.seed);
            spec.validate()?;
            Ok(DomainData::generate(spec, config.n_live, config.n_spoof, g))
        })
        .collect::<Result<_>>()?;
    let target_spec = config.relevance.target_spec(
        &domains[config.relevance.source].spec,
        config.num_sources,
        config.seed ^ 0x7A11_0E5E,
    )?;
    domains.push(DomainData::generate(
        target_spec,
        config.target_live,
        config.target_spoof,
        g,
    ));
    Ok(Dataset {
        geometry: g,
        target: Some(config.num_sources),
        domains,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    domains: Vec<DomainSpec>,
    target: Option<usize>,
    live_class: usize,
}

/// Layout (little-endian): magic "AMELDS1", u32 version, u32 domain count,
/// u32 H, u32 W, u32 depth size, u32 sample count per domain, a length-prefixed
/// JSON manifest of the domain specs, then per sample the `f32` image, one
/// label byte and the `f32` depth map, grouped by domain.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let g = ds.geometry;
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC.as_bytes());
    w.u32(DATASET_VERSION);
    w.u32(ds.domains.len() as u32);
    w.u32(g.image_hw as u32);
    w.u32(g.image_hw as u32);
    w.u32(g.depth_hw as u32);
    for d in &ds.domains {
        w.u32(d.samples.len() as u32);
    }
    let manifest = Manifest {
        domains: ds.domains.iter().map(|d| d.spec.clone()).collect(),
        target: ds.target,
        live_class: LIVE_CLASS,
    };
    w.blob(&serde_json::to_vec(&manifest)?);
    for d in &ds.domains {
        for s in &d.samples {
            if s.image.shape() != [3, g.image_hw, g.image_hw] || s.depth.shape() != [1, g.depth_hw, g.depth_hw] {
                return Err(shape_err("write_dataset", "sample shape differs from dataset geometry"));
            }
            w.f32s(s.image.data());
            w.u8(s.label);
            w.f32s(s.depth.data());
        }
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(AmelError::BadVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let k = r.u32("header")? as usize;
    let h = r.u32("header")? as usize;
    let w = r.u32("header")? as usize;
    let d = r.u32("header")? as usize;
    if h != w {
        return Err(shape_err("read_dataset", format!("non-square images {}x{}", h, w)));
    }
    let mut counts = Vec::with_capacity(k);
    for _ in 0..k {
        counts.push(r.u32("header")? as usize);
    }
    let manifest: Manifest = serde_json::from_slice(r.blob("manifest")?)?;
    if manifest.domains.len() != k {
        return Err(shape_err(
            "read_dataset",
            format!("manifest lists {} domains, header {}", manifest.domains.len(), k),
        ));
    }
    let mut domains = Vec::with_capacity(k);
    for (di, (spec, n)) in manifest.domains.into_iter().zip(counts).enumerate() {
        let section = format!("samples of domain {}", di);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let image = Tensor::new(&[3, h, w], r.f32s(3 * h * w, &section)?)?;
            let label = r.u8(&section)?;
            let depth = Tensor::new(&[1, d, d], r.f32s(d * d, &section)?)?;
            samples.push(Sample {
                image,
                label,
                depth,
                domain_id: spec.domain_id,
            });
        }
        domains.push(DomainData { spec, samples });
    }
    if !r.is_at_end() {
        return Err(shape_err("read_dataset", "trailing bytes after the last sample"));
    }
    Ok(Dataset {
        geometry: Geometry {
            image_hw: h,
            depth_hw: d,
        },
        domains,
        target: manifest.target,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests;
