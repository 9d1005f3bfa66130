use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::manifest::{write_manifest, DatasetManifest, SubjectRecord};
use super::nifti::write_volume;
use crate::error::{Error, Result};
use crate::mechanisms::{sha256_hex, MechanismSet};
use crate::phantom::{NoiseField, PhantomGenerator, VOLUME_NAMES};
use crate::scm::{sample_prior, CausalGraph, Evidence};

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const IMAGE_DIR: &str = "images";

// spread of the shape nuisances that volumes leave free
const ASPECT_STD: f64 = 0.03;
const OFFSET_RANGE_MM: f64 = 3.0;

/// Seed for one record's draw of `kind` (style or noise).
pub fn record_seed(seed: u64, index: usize, kind: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().into_iter().chain((index as u64).to_le_bytes()).chain(kind.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Style vector realizing `volumes` with seeded aspect and ventricle offset.
/// Unrealizable requests fall back to the nearest realizable volumes and
/// are flagged.
pub fn realize_subject(gen: &PhantomGenerator, volumes: [f64; 3], style_seed: u64) -> (Vec<f64>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let normal = Normal::new(0.0, ASPECT_STD).expect("valid std");
    let aspect = [normal.sample(&mut rng), normal.sample(&mut rng)];
    let offset = rng.random_range(-OFFSET_RANGE_MM..OFFSET_RANGE_MM);
    let ok = |w: Vec<f64>| -> Option<Vec<f64>> {
        let shape = gen.decoder.decode(&w).ok()?;
        shape.clamped.is_empty().then_some(w)
    };
    if let Some(w) = gen.decoder.realize_volumes(volumes, aspect, offset).ok().and_then(ok) {
        return (w, false);
    }
    let [b, g, v] = volumes;
    let b = b.clamp(900.0, 1800.0);
    let nearest = [b, g.clamp(0.2 * b, 0.6 * b), v.clamp(5.0, 0.1 * b)];
    let w = gen
        .decoder
        .realize_volumes(nearest, [0.0; 2], 0.0)
        .unwrap_or_else(|_| vec![0.0; gen.style_dim()]);
    (w, true)
}

/// Style vector and noise field a manifest record was rendered from.
pub fn record_latent(gen: &PhantomGenerator, record: &SubjectRecord) -> (Vec<f64>, NoiseField) {
    let (w, _) = realize_subject(gen, record.volumes(), record.style_seed);
    (w, gen.noise_from_seed(record.noise_seed))
}

fn provenance_hash<T: serde::Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializes").as_bytes())
}

/// Samples `n` subjects from the SCM, renders one image each and writes
/// `images/*.nii` plus `manifest.csv` (last) under `out_dir`.
pub fn sample_dataset(
    graph: &CausalGraph,
    mechanisms: &MechanismSet,
    gen: &PhantomGenerator,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    for name in VOLUME_NAMES.iter().chain(&["age", "sex", "mmse"]) {
        graph.variable(name)?;
    }
    gen.grid.validate()?;
    let cohort = sample_prior(graph, mechanisms, seed, n)?;
    let images = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let width = n.saturating_sub(1).to_string().len().max(4);
    let records = cohort
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| make_record(row, i, width, seed, gen, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(gen.grid);
    manifest.records = records;
    manifest.provenance.insert("seed".into(), seed.to_string());
    manifest.provenance.insert("graph_sha256".into(), provenance_hash(graph));
    manifest.provenance.insert("mechanisms_sha256".into(), provenance_hash(mechanisms));
    manifest.provenance.insert("generator_sha256".into(), provenance_hash(gen));
    write_manifest(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

fn make_record(
    row: &Evidence,
    i: usize,
    width: usize,
    seed: u64,
    gen: &PhantomGenerator,
    out_dir: &Path,
) -> Result<SubjectRecord> {
    let get = |k: &str| row.get(k).ok_or_else(|| Error::IncompleteEvidence(vec![k.to_string()]));
    let volumes = [get("brain")?, get("gm")?, get("ventricle")?];
    let style_seed = record_seed(seed, i, 1);
    let noise_seed = record_seed(seed, i, 2);
    let (w, flagged) = realize_subject(gen, volumes, style_seed);
    let image = gen.generate(&w, &gen.noise_from_seed(noise_seed))?;
    let subject_id = format!("sub-{i:0width$}");
    let image_path = format!("{IMAGE_DIR}/{subject_id}.nii");
    write_volume(&out_dir.join(&image_path), &image)?;
    Ok(SubjectRecord {
        subject_id,
        age: get("age")?,
        sex: get("sex")?,
        mmse: get("mmse")?,
        brain_ml: volumes[0],
        gm_ml: volumes[1],
        ventricle_ml: volumes[2],
        image_path,
        style_seed,
        noise_seed,
        flagged,
    })
}
