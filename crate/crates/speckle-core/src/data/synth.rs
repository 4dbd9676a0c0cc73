//! Synthetic speckled target imagery.
//!
//! Each class is a fixed template of three to five Gaussian scatterers:
//! two bright scatterers shared by every class plus one to three
//! class-specific ones, so classes overlap heavily and differ in finer
//! structure. Every sample jitters the template by a continuous sub-pixel
//! shift, multiplies by per-pixel unit-mean exponential speckle, and clips
//! to [0, 1]. All randomness derives from the dataset seed, so a spec
//! regenerates byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use super::tns::{write_tns, TnsError};
use crate::rng::{derive, seeded};

/// Minimum image side; matches the smallest input the feature extractor
/// accepts.
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tns(#[from] TnsError),
    #[error("{what} must be at least {min}, got {got}")]
    BadSpec {
        what: &'static str,
        min: usize,
        got: usize,
    },
}

/// Parameters of one generated dataset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// What `generate` wrote.
#[derive(Debug)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub files_written: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Copy)]
struct Scatterer {
    x: f64,
    y: f64,
    amplitude: f64,
    sigma: f64,
}

fn validate(spec: &SynthSpec) -> Result<(), SynthError> {
    let checks = [
        ("classes", 2usize, spec.classes),
        ("train_per_class", 1, spec.train_per_class),
        ("test_per_class", 1, spec.test_per_class),
        ("image_size", MIN_IMAGE_SIZE, spec.image_size),
    ];
    for (what, min, got) in checks {
        if got < min {
            return Err(SynthError::BadSpec { what, min, got });
        }
    }
    Ok(())
}

fn scatterer_in<R: Rng>(
    rng: &mut R,
    size: f64,
    box_lo: f64,
    box_hi: f64,
    amp_lo: f64,
    amp_hi: f64,
) -> Scatterer {
    Scatterer {
        x: rng.gen_range(box_lo * size..box_hi * size),
        y: rng.gen_range(box_lo * size..box_hi * size),
        amplitude: rng.gen_range(amp_lo..amp_hi),
        sigma: rng.gen_range(size / 12.0..size / 7.0),
    }
}

/// Scatterers shared by all classes plus the class-specific ones. The
/// shared pair sits bright in the central box; the class-own scatterers
/// are dimmer and spread over a wider field, so class evidence hides in
/// the periphery under a dominant common structure.
fn template(spec: &SynthSpec, class: usize) -> Vec<Scatterer> {
    let size = spec.image_size as f64;
    let mut shared_rng = seeded(derive(spec.seed, "shared-structure", 0));
    let mut out: Vec<Scatterer> = (0..2)
        .map(|_| scatterer_in(&mut shared_rng, size, 0.4, 0.6, 0.55, 0.75))
        .collect();
    let mut class_rng = seeded(derive(spec.seed, "class-template", class as u64));
    let own = class_rng.gen_range(1..=3usize);
    out.extend((0..own).map(|_| scatterer_in(&mut class_rng, size, 0.15, 0.85, 0.3, 0.5)));
    out
}

fn clean_value(scatterers: &[Scatterer], x: f64, y: f64, dx: f64, dy: f64) -> f64 {
    scatterers
        .iter()
        .map(|s| {
            let rx = x - (s.x + dx);
            let ry = y - (s.y + dy);
            s.amplitude * (-(rx * rx + ry * ry) / (2.0 * s.sigma * s.sigma)).exp()
        })
        .sum()
}

fn render_sample<R: Rng>(spec: &SynthSpec, scatterers: &[Scatterer], rng: &mut R) -> Vec<f64> {
    let s = spec.image_size;
    let max_shift = s as f64 / 16.0;
    let dx = rng.gen_range(-max_shift..max_shift);
    let dy = rng.gen_range(-max_shift..max_shift);
    let mut out = Vec::with_capacity(s * s);
    for yi in 0..s {
        for xi in 0..s {
            let clean = clean_value(scatterers, xi as f64, yi as f64, dx, dy);
            let speckle: f64 = Exp1.sample(rng);
            out.push((clean * speckle).clamp(0.0, 1.0));
        }
    }
    out
}

pub fn class_name(class: usize) -> String {
    format!("class_{class:02}")
}

/// Writes `root/{train,test}/<class>/<sample>.tns` for the whole spec.
pub fn generate<P: AsRef<Path>>(root: P, spec: &SynthSpec) -> Result<SynthSummary, SynthError> {
    validate(spec)?;
    let root = root.as_ref().to_path_buf();
    let mut files_written = 0usize;
    let mut class_names = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let name = class_name(class);
        let scatterers = template(spec, class);
        for (split, count) in [("train", spec.train_per_class), ("test", spec.test_per_class)] {
            let dir = root.join(split).join(&name);
            fs::create_dir_all(&dir)?;
            let mut rng = seeded(derive(
                spec.seed,
                split,
                (class as u64) << 32,
            ));
            for index in 0..count {
                let image = render_sample(spec, &scatterers, &mut rng);
                let path = dir.join(format!("s{index:04}.tns"));
                write_tns(&path, &[spec.image_size, spec.image_size], &image)?;
                files_written += 1;
            }
        }
        class_names.push(name);
    }
    Ok(SynthSummary {
        root,
        files_written,
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tns::read_tns;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 2,
            train_per_class: 3,
            test_per_class: 2,
            image_size: 16,
            seed,
        }
    }

    #[test]
    fn rejects_undersized_specs() {
        let mut s = spec(1);
        s.classes = 1;
        assert!(matches!(
            generate(tempfile::tempdir().unwrap().path(), &s),
            Err(SynthError::BadSpec { what: "classes", .. })
        ));
        let mut s = spec(1);
        s.image_size = 8;
        assert!(matches!(
            generate(tempfile::tempdir().unwrap().path(), &s),
            Err(SynthError::BadSpec {
                what: "image_size",
                ..
            })
        ));
    }

    #[test]
    fn writes_expected_tree_with_bounded_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(dir.path(), &spec(7)).unwrap();
        assert_eq!(summary.files_written, 2 * (3 + 2));
        assert_eq!(summary.class_names, vec!["class_00", "class_01"]);
        for split in ["train", "test"] {
            for class in &summary.class_names {
                let class_dir = dir.path().join(split).join(class);
                let mut files: Vec<_> = fs::read_dir(&class_dir)
                    .unwrap()
                    .map(|e| e.unwrap().path())
                    .collect();
                files.sort();
                assert_eq!(files.len(), if split == "train" { 3 } else { 2 });
                for f in files {
                    let (shape, data) = read_tns(&f).unwrap();
                    assert_eq!(shape, vec![16, 16]);
                    assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), &spec(42)).unwrap();
        generate(b.path(), &spec(42)).unwrap();
        let rel = "train/class_01/s0002.tns";
        let bytes_a = fs::read(a.path().join(rel)).unwrap();
        let bytes_b = fs::read(b.path().join(rel)).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let c = tempfile::tempdir().unwrap();
        generate(c.path(), &spec(43)).unwrap();
        let bytes_c = fs::read(c.path().join(rel)).unwrap();
        assert_ne!(bytes_a, bytes_c);
    }

    #[test]
    fn classes_differ_and_samples_within_a_class_differ() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &spec(11)).unwrap();
        let read = |p: &str| read_tns(dir.path().join(p)).unwrap().1;
        let c0a = read("train/class_00/s0000.tns");
        let c0b = read("train/class_00/s0001.tns");
        let c1a = read("train/class_01/s0000.tns");
        assert_ne!(c0a, c0b, "speckle must vary within a class");
        assert_ne!(c0a, c1a, "templates must vary across classes");
        // Train and test streams must not duplicate each other.
        let t0a = read("test/class_00/s0000.tns");
        assert_ne!(c0a, t0a);
    }

    #[test]
    fn shared_scatterers_correlate_class_means() {
        // Mean images of two classes share the two bright common
        // scatterers, so their correlation is clearly positive.
        let dir = tempfile::tempdir().unwrap();
        let s = SynthSpec {
            classes: 2,
            train_per_class: 40,
            test_per_class: 1,
            image_size: 16,
            seed: 3,
        };
        generate(dir.path(), &s).unwrap();
        let mean_image = |class: &str| -> Vec<f64> {
            let mut acc = vec![0.0; 256];
            for i in 0..40 {
                let (_, d) =
                    read_tns(dir.path().join(format!("train/{class}/s{i:04}.tns"))).unwrap();
                for (a, v) in acc.iter_mut().zip(&d) {
                    *a += v / 40.0;
                }
            }
            acc
        };
        let m0 = mean_image("class_00");
        let m1 = mean_image("class_01");
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let corr = dot(&m0, &m1) / (dot(&m0, &m0).sqrt() * dot(&m1, &m1).sqrt());
        assert!(corr > 0.5, "correlation {corr}");
        assert!(corr < 0.999, "classes collapsed, correlation {corr}");
    }

    #[test]
    fn speckle_is_unit_mean() {
        let mut rng = seeded(99);
        let n = 200_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let draw: f64 = Exp1.sample(&mut rng);
                draw
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
