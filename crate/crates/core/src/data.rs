//! Synthetic lesion phantoms, cropping, dataset splits and the on-disk dataset
//! layout (`<id>_img.rsav`, `<id>_lbl.rsav`, `manifest.json`).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{read_volume, write_volume};

/// Voxel size `(x, y, z)` in mm attached to generated samples.
pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [0.7, 0.7, 3.0];
pub const DEFAULT_DIMS: [usize; 3] = [64, 64, 32];
pub const DEFAULT_CROP: [usize; 3] = [32, 32, 16];
/// Lesion voxel fraction of the reference clinical data.
pub const DEFAULT_LESION_RATE: f64 = 5.15e-4;
pub const DEFAULT_CHANNELS: usize = 3;
pub const MIN_DIM: usize = 8;
pub const MAX_LESION_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// `[C, D, H, W]` intensities.
    pub image: Tensor<f32>,
    /// `[D, H, W]` binary lesion mask.
    pub label: Tensor<f32>,
    pub voxel_size: [f64; 3],
}

impl VolumeSample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.label.shape();
        [s[0], s[1], s[2]]
    }

    pub fn lesion_voxels(&self) -> usize {
        self.label.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn lesion_fraction(&self) -> f64 {
        self.lesion_voxels() as f64 / self.label.len() as f64
    }
}

#[derive(Clone, Copy)]
enum Tissue {
    Background,
    Csf,
    Grey,
    White,
    Lesion,
}

/// Mean intensity per tissue for the FLAIR-, T2- and T1-like channels.
/// Lesions are hyperintense on the first two.
const PROFILES: [[f32; 5]; 3] = [
    // background, csf, grey, white, lesion
    [0.0, 0.10, 0.50, 0.40, 1.00],
    [0.0, 0.90, 0.55, 0.40, 0.85],
    [0.0, 0.15, 0.50, 0.70, 0.35],
];

fn profile(channel: usize, tissue: Tissue) -> f32 {
    let base = PROFILES[channel % PROFILES.len()][tissue as usize];
    // Extra channels reuse the profiles with a mild contrast change.
    let round = (channel / PROFILES.len()) as f32;
    base * (1.0 - 0.1 * round)
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius of the centre of voxel `p`.
    fn radius(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] as f64 + 0.5 - self.center[i]) / self.semi[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Voxels whose centre lies inside, clipped to `dims`.
    fn voxels(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let lo = |i: usize| ((self.center[i] - self.semi[i] - 0.5).floor().max(0.0)) as usize;
        let hi = |i: usize| ((self.center[i] + self.semi[i]).ceil() as usize).min(dims[i]);
        let mut out = Vec::new();
        for d in lo(0)..hi(0) {
            for h in lo(1)..hi(1) {
                for w in lo(2)..hi(2) {
                    if self.radius([d, h, w]) <= 1.0 {
                        out.push([d, h, w]);
                    }
                }
            }
        }
        out
    }
}

fn flat(dims: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

/// Smooth additive field: a few low-frequency plane waves.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3], amplitude: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let freq = [0, 1, 2]
                    .map(|i| rng.random_range(0.5..2.0) * std::f64::consts::TAU / dims[i] as f64);
                (
                    freq,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    amplitude,
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [usize; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(f, phase, amp)| {
                amp * (f[0] * p[0] as f64 + f[1] * p[1] as f64 + f[2] * p[2] as f64 + phase).cos()
            })
            .sum()
    }
}

/// Generates a deterministic phantom: an ellipsoidal brain with CSF, grey and
/// white matter bands, smooth and white noise, and bright ellipsoidal lesions
/// inside the brain whose voxel fraction lies within `[0.5, 2]×` the target.
pub fn generate_phantom(
    seed: u64,
    dims: [usize; 3],
    lesion_rate_target: f64,
    channels: usize,
) -> Result<VolumeSample> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::InvalidConfig(format!(
            "phantom dims {dims:?} must be at least {MIN_DIM} on every axis"
        )));
    }
    if !(lesion_rate_target > 0.0 && lesion_rate_target < MAX_LESION_RATE) {
        return Err(Error::InvalidRate(lesion_rate_target));
    }
    if channels == 0 {
        return Err(Error::InvalidConfig(
            "phantom needs at least one channel".into(),
        ));
    }
    let total = dims.iter().product::<usize>();
    let target = lesion_rate_target * total as f64;
    let (min_count, max_count) = (
        (0.5 * target).ceil() as usize,
        (2.0 * target).floor() as usize,
    );
    if max_count < min_count.max(1) {
        return Err(Error::RateUnreachable {
            target: lesion_rate_target,
            dims,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brain = Ellipsoid {
        center: [0, 1, 2].map(|i| dims[i] as f64 * rng.random_range(0.48..0.52)),
        semi: [0, 1, 2].map(|i| dims[i] as f64 * rng.random_range(0.38..0.44)),
    };
    let ventricles = Ellipsoid {
        center: brain.center,
        semi: brain.semi.map(|s| s * 0.18),
    };

    let mut tissue = vec![Tissue::Background; total];
    let mut brain_radius = vec![f64::INFINITY; total];
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [d, h, w];
                let r = brain.radius(p);
                let i = flat(dims, p);
                brain_radius[i] = r;
                tissue[i] = if r > 1.0 {
                    Tissue::Background
                } else if ventricles.radius(p) <= 1.0 {
                    Tissue::Csf
                } else if r > 0.78 {
                    Tissue::Grey
                } else {
                    Tissue::White
                };
            }
        }
    }

    let mut label = vec![0.0f32; total];
    let mut count = 0usize;
    for _ in 0..500 {
        if count as f64 >= target {
            break;
        }
        let budget = max_count - count;
        let mut semi = [0, 1, 2].map(|_| rng.random_range(1.4..2.8));
        let volume = 4.0 / 3.0 * std::f64::consts::PI * semi.iter().product::<f64>();
        if volume > budget as f64 {
            let shrink = (budget as f64 / volume).cbrt().max(0.3);
            semi = semi.map(|s| (s * shrink).max(0.6));
        }
        let center =
            [0, 1, 2].map(|i| brain.center[i] + brain.semi[i] * 0.65 * rng.random_range(-1.0..1.0));
        let blob = Ellipsoid { center, semi };
        let voxels = blob.voxels(dims);
        if voxels.is_empty() || voxels.iter().any(|&p| brain_radius[flat(dims, p)] > 0.92) {
            continue;
        }
        let fresh = voxels
            .iter()
            .filter(|&&p| label[flat(dims, p)] == 0.0)
            .count();
        if fresh == 0 || count + fresh > max_count {
            continue;
        }
        for p in voxels {
            let i = flat(dims, p);
            label[i] = 1.0;
            tissue[i] = Tissue::Lesion;
        }
        count += fresh;
    }
    if count < min_count.max(1) {
        return Err(Error::RateUnreachable {
            target: lesion_rate_target,
            dims,
        });
    }

    let white = Normal::new(0.0, 0.02).expect("valid normal");
    let mut image = vec![0.0f32; channels * total];
    for c in 0..channels {
        let field = SmoothField::new(&mut rng, dims, 0.03);
        let plane = &mut image[c * total..(c + 1) * total];
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let p = [d, h, w];
                    let i = flat(dims, p);
                    let t = tissue[i];
                    let noise = white.sample(&mut rng);
                    plane[i] = match t {
                        Tissue::Background => (noise * 0.5) as f32,
                        _ => profile(c, t) + (field.at(p) + noise) as f32,
                    };
                }
            }
        }
    }

    Ok(VolumeSample {
        id: format!("phantom-{seed}"),
        image: Tensor::new(&[channels, dims[0], dims[1], dims[2]], image)?,
        label: Tensor::new(&dims, label)?,
        voxel_size: DEFAULT_VOXEL_SIZE,
    })
}

fn check_crop(dims: [usize; 3], crop: [usize; 3]) -> Result<()> {
    if crop.contains(&0) {
        return Err(Error::ZeroExtent);
    }
    if crop.iter().zip(&dims).any(|(c, d)| c > d) {
        return Err(Error::CropTooLarge { crop, dims });
    }
    Ok(())
}

/// Copies the `[offset, offset + crop)` box out of a `[C, D, H, W]` buffer.
fn extract(
    data: &[f32],
    channels: usize,
    dims: [usize; 3],
    offset: [usize; 3],
    crop: [usize; 3],
) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * crop.iter().product::<usize>());
    let plane = dims.iter().product::<usize>();
    for c in 0..channels {
        for d in offset[0]..offset[0] + crop[0] {
            for h in offset[1]..offset[1] + crop[1] {
                let start = c * plane + flat(dims, [d, h, offset[2]]);
                out.extend_from_slice(&data[start..start + crop[2]]);
            }
        }
    }
    out
}

/// Crops `sample` at an explicit offset.
pub fn crop_at(
    sample: &VolumeSample,
    offset: [usize; 3],
    crop: [usize; 3],
) -> Result<VolumeSample> {
    let dims = sample.dims();
    check_crop(dims, crop)?;
    if (0..3).any(|i| offset[i] + crop[i] > dims[i]) {
        return Err(Error::CropTooLarge { crop, dims });
    }
    let channels = sample.image.shape()[0];
    Ok(VolumeSample {
        id: sample.id.clone(),
        image: Tensor::new(
            &[channels, crop[0], crop[1], crop[2]],
            extract(sample.image.data(), channels, dims, offset, crop),
        )?,
        label: Tensor::new(&crop, extract(sample.label.data(), 1, dims, offset, crop))?,
        voxel_size: sample.voxel_size,
    })
}

/// Uniformly drawn crop offset.
pub fn random_offset(rng: &mut impl Rng, dims: [usize; 3], crop: [usize; 3]) -> Result<[usize; 3]> {
    check_crop(dims, crop)?;
    Ok([0, 1, 2].map(|i| rng.random_range(0..=dims[i] - crop[i])))
}

/// Axis-aligned crop at a seeded random offset.
pub fn random_crop(sample: &VolumeSample, crop: [usize; 3], rng_seed: u64) -> Result<VolumeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let offset = random_offset(&mut rng, sample.dims(), crop)?;
    crop_at(sample, offset, crop)
}

pub const LESION_CROP_RETRIES: usize = 20;

/// Random crop that retries up to [`LESION_CROP_RETRIES`] times to include at
/// least one lesion voxel; the last draw is kept if none does.
pub fn random_crop_with_lesion(
    sample: &VolumeSample,
    crop: [usize; 3],
    rng: &mut impl Rng,
) -> Result<VolumeSample> {
    let mut out = None;
    for _ in 0..=LESION_CROP_RETRIES {
        let offset = random_offset(rng, sample.dims(), crop)?;
        let candidate = crop_at(sample, offset, crop)?;
        let hit = candidate.lesion_voxels() > 0;
        out = Some(candidate);
        if hit {
            break;
        }
    }
    Ok(out.expect("at least one draw"))
}

/// Deterministic shuffled partition into `n_train` training ids and the rest.
pub fn split_dataset(
    ids: &[String],
    n_train: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if n_train >= ids.len() {
        return Err(Error::InvalidSplit {
            n_train,
            total: ids.len(),
        });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub n: usize,
    pub lesion_rate: f64,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub generator: GeneratorParams,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn image_file(id: &str) -> String {
    format!("{id}_img.rsav")
}

pub fn label_file(id: &str) -> String {
    format!("{id}_lbl.rsav")
}

/// Per-sample seeds derived from the dataset seed.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// Generates `params.n` phantoms named `case-000`, `case-001`, ...
pub fn generate_dataset(params: &GeneratorParams, dims: [usize; 3]) -> Result<Vec<VolumeSample>> {
    sample_seeds(params.seed, params.n)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut sample = generate_phantom(s, dims, params.lesion_rate, params.channels)?;
            sample.id = format!("case-{i:03}");
            Ok(sample)
        })
        .collect()
}

pub fn write_dataset(
    dir: &Path,
    samples: &[VolumeSample],
    dims: [usize; 3],
    params: &GeneratorParams,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        write_volume(dir.join(image_file(&s.id)), &s.image)?;
        write_volume(dir.join(label_file(&s.id)), &s.label)?;
    }
    let manifest = DatasetManifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        dims,
        voxel_size: DEFAULT_VOXEL_SIZE,
        generator: params.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_sample(dir: &Path, id: &str, voxel_size: [f64; 3]) -> Result<VolumeSample> {
    let image: Tensor<f32> = read_volume(dir.join(image_file(id)))?;
    let label: Tensor<f32> = read_volume(dir.join(label_file(id)))?;
    if image.rank() != 4 || label.rank() != 3 || image.shape()[1..] != *label.shape() {
        return Err(Error::ShapeMismatch {
            expected: image.shape().to_vec(),
            actual: label.shape().to_vec(),
        });
    }
    if label.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinary);
    }
    Ok(VolumeSample {
        id: id.to_string(),
        image,
        label,
        voxel_size,
    })
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<VolumeSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .ids
        .iter()
        .map(|id| load_sample(dir, id, manifest.voxel_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(11, [16, 16, 16], 0.01, 2).unwrap();
        let b = generate_phantom(11, [16, 16, 16], 0.01, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(12, [16, 16, 16], 0.01, 2).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn rate_unreachable_in_tiny_volume() {
        assert!(matches!(
            generate_phantom(0, [8, 8, 8], DEFAULT_LESION_RATE, 3),
            Err(Error::RateUnreachable { .. })
        ));
        assert!(matches!(
            generate_phantom(0, [16, 16, 16], 0.2, 3),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn crop_examples() {
        let s = generate_phantom(3, [16, 16, 16], 0.01, 2).unwrap();
        assert_eq!(random_crop(&s, [16, 16, 16], 5).unwrap(), s);
        assert!(matches!(
            random_crop(&s, [32, 8, 8], 5),
            Err(Error::CropTooLarge { .. })
        ));
        let c = random_crop(&s, [8, 8, 8], 5).unwrap();
        let offset = random_offset(&mut ChaCha8Rng::seed_from_u64(5), [16; 3], [8; 3]).unwrap();
        for ch in 0..2 {
            for d in 0..8 {
                for h in 0..8 {
                    for w in 0..8 {
                        let src =
                            ((ch * 16 + d + offset[0]) * 16 + h + offset[1]) * 16 + w + offset[2];
                        let dst = ((ch * 8 + d) * 8 + h) * 8 + w;
                        assert_eq!(c.image.data()[dst], s.image.data()[src]);
                    }
                }
            }
        }
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..43).map(|i| format!("id{i}")).collect();
        let (train, test) = split_dataset(&ids, 20, 0).unwrap();
        assert_eq!((train.len(), test.len()), (20, 23));
        assert_eq!(split_dataset(&ids, 20, 0).unwrap(), (train, test));
        assert!(matches!(
            split_dataset(&ids, 43, 0),
            Err(Error::InvalidSplit { .. })
        ));
    }
}
