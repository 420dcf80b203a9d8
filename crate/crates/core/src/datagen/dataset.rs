//! Dataset container: seed-driven sample generation, the on-disk layout
//! (manifest + per-scene files), and loading.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.txt
//! sample_00000/
//!   mixed.wav
//!   obj0_audio.wav
//!   obj0_boxes.csv
//!   obj0_voxels.vxg
//!   obj0_frame_000.pgm ...
//!   obj0_spec_000.spg ...
//! ```

use super::scene::{
    gen_scene_sequence, gen_single_view_sample, BoundingBox, ObjectSpec, SampleSequence,
    SceneConfig, SceneData, SCENE_SIZE, SPRITE_SIZE,
};
use super::shapes::ShapeKind;
use crate::audio::{read_wav, write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::material::Material;
use crate::signal::{Spectrogram, MULTI_FPS};
use crate::voxel::{read_voxel_grid, write_voxel_grid, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::validation(format!("unknown split '{s}'"))),
        }
    }
}

/// 80/10/10 partition keyed on the scene seed.
pub fn split_for_seed(seed: u64) -> Split {
    match seed % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    SingleView,
    MultiFrame,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::SingleView => "single",
            SampleMode::MultiFrame => "multi",
        }
    }

    pub fn parse(s: &str) -> Result<SampleMode> {
        match s {
            "single" => Ok(SampleMode::SingleView),
            "multi" => Ok(SampleMode::MultiFrame),
            _ => Err(Error::validation(format!("unknown sample mode '{s}'"))),
        }
    }
}

/// Randomized dataset recipe. Everything downstream is a pure function of
/// this struct plus `seed`.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub mode: SampleMode,
    pub scenes: usize,
    pub seed: u64,
    pub kinds: Vec<ShapeKind>,
    pub materials: Vec<Material>,
    pub size_range: (f64, f64),
    /// Multi-frame settings.
    pub objects_min: usize,
    pub objects_max: usize,
    pub frame_count: usize,
    pub fps: f64,
    /// Single-view settings.
    pub views: Vec<View>,
    /// Hollow/solid pairing: consecutive scenes share a base shape and
    /// size; even scenes take the solid variant with a material from
    /// `pair_solid_materials`, odd scenes the hollow variant with one from
    /// `pair_hollow_materials`.
    pub paired: bool,
    pub pair_solid_materials: Vec<Material>,
    pub pair_hollow_materials: Vec<Material>,
    pub pair_size_box: f64,
    pub pair_size_sphere: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            mode: SampleMode::SingleView,
            scenes: 8,
            seed: 0,
            kinds: ShapeKind::ALL.to_vec(),
            materials: Material::ALL.to_vec(),
            size_range: (0.5, 1.0),
            objects_min: 1,
            objects_max: 3,
            frame_count: 24,
            fps: MULTI_FPS,
            views: vec![View::Front],
            paired: false,
            pair_solid_materials: vec![Material::Granite, Material::Marble],
            pair_hollow_materials: vec![Material::Oak, Material::Slate],
            pair_size_box: 0.8,
            pair_size_sphere: 0.9,
        }
    }
}

/// One generated scene with its manifest metadata.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub objects: Vec<ObjectSpec>,
    pub gains: Vec<f64>,
    pub data: SceneData,
}

fn pick<'a, T, R: Rng>(pool: &'a [T], rng: &mut R) -> Result<&'a T> {
    if pool.is_empty() {
        return Err(Error::config("empty sampling pool"));
    }
    Ok(&pool[rng.gen_range(0..pool.len())])
}

/// Generates every scene of `spec` in memory.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<GeneratedScene>> {
    if spec.scenes == 0 {
        return Err(Error::config("dataset needs at least one scene"));
    }
    if spec.paired && (spec.mode != SampleMode::SingleView || spec.scenes % 2 != 0) {
        return Err(Error::config(
            "paired generation needs single-view mode and an even scene count",
        ));
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene_seeds: Vec<u64> = (0..spec.scenes).map(|_| master.gen()).collect();
    let mut out = Vec::with_capacity(spec.scenes);
    for (index, &seed) in scene_seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = match spec.mode {
            SampleMode::SingleView => {
                let (kind, size, material, gain) = if spec.paired {
                    // The pair RNG must not depend on which half we are in,
                    // so base shape and size come from the pair index.
                    let pair = index / 2;
                    let mut pair_rng =
                        ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(pair as u64 + 1)));
                    let base = if pair_rng.gen_bool(0.5) {
                        ShapeKind::SolidBox
                    } else {
                        ShapeKind::Sphere
                    };
                    let size = match base {
                        ShapeKind::SolidBox => spec.pair_size_box,
                        _ => spec.pair_size_sphere,
                    };
                    let gain = rng.gen_range(0.5..1.2);
                    if index % 2 == 0 {
                        (base, size, *pick(&spec.pair_solid_materials, &mut rng)?, gain)
                    } else {
                        let hollow = base.hollow_variant().expect("box and sphere have hollow variants");
                        (hollow, size, *pick(&spec.pair_hollow_materials, &mut rng)?, gain)
                    }
                } else {
                    let kind = *pick(&spec.kinds, &mut rng)?;
                    let size = rng.gen_range(spec.size_range.0..=spec.size_range.1);
                    let material = *pick(&spec.materials, &mut rng)?;
                    (kind, size, material, rng.gen_range(0.5..1.2))
                };
                let (sample, clip) =
                    gen_single_view_sample(kind, size, material, &spec.views, gain)?;
                let object = ObjectSpec {
                    kind,
                    size_scale: size,
                    material,
                    position: (0.0, 0.0),
                    velocity: (0.0, 0.0),
                    spin: 0.0,
                };
                GeneratedScene {
                    index,
                    seed,
                    split: split_for_seed(seed),
                    objects: vec![object],
                    gains: vec![gain],
                    data: SceneData {
                        samples: vec![sample],
                        unmixed: vec![clip.clone()],
                        mixed: clip,
                        impacts: Vec::new(),
                    },
                }
            }
            SampleMode::MultiFrame => {
                let n_obj = rng.gen_range(spec.objects_min..=spec.objects_max.max(spec.objects_min));
                let mut objects = Vec::with_capacity(n_obj);
                let max_pos = (SCENE_SIZE - SPRITE_SIZE) as f64;
                for _ in 0..n_obj {
                    let kind = *pick(&spec.kinds, &mut rng)?;
                    let size = rng.gen_range(spec.size_range.0..=spec.size_range.1);
                    let material = *pick(&spec.materials, &mut rng)?;
                    let position = place_apart(&objects, max_pos, &mut rng)?;
                    let velocity = (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5));
                    let spin = if rng.gen_bool(0.5) {
                        0.0
                    } else {
                        rng.gen_range(0.05..0.15)
                    };
                    objects.push(ObjectSpec {
                        kind,
                        size_scale: size,
                        material,
                        position,
                        velocity,
                        spin,
                    });
                }
                let cfg = SceneConfig {
                    objects: objects.clone(),
                    frame_count: spec.frame_count,
                    fps: spec.fps,
                    rng_seed: seed,
                };
                GeneratedScene {
                    index,
                    seed,
                    split: split_for_seed(seed),
                    gains: vec![0.0; objects.len()],
                    objects,
                    data: gen_scene_sequence(&cfg)?,
                }
            }
        };
        out.push(scene);
    }
    Ok(out)
}

fn place_apart<R: Rng>(placed: &[ObjectSpec], max_pos: f64, rng: &mut R) -> Result<(f64, f64)> {
    for _ in 0..200 {
        let cand = (rng.gen_range(0.0..=max_pos), rng.gen_range(0.0..=max_pos));
        let clear = placed.iter().all(|o| {
            (o.position.0 - cand.0).abs() >= SPRITE_SIZE as f64
                || (o.position.1 - cand.1).abs() >= SPRITE_SIZE as f64
        });
        if clear {
            return Ok(cand);
        }
    }
    Err(Error::config(
        "could not place objects without initial overlap",
    ))
}

fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:05}"))
}

/// Writes a generated dataset under `root` (manifest plus per-scene files).
pub fn write_dataset(root: &Path, spec: &DatasetSpec, scenes: &[GeneratedScene]) -> Result<()> {
    fs::create_dir_all(root)?;
    for scene in scenes {
        let dir = scene_dir(root, scene.index);
        fs::create_dir_all(&dir)?;
        write_wav(&dir.join("mixed.wav"), &scene.data.mixed)?;
        for (i, sample) in scene.data.samples.iter().enumerate() {
            write_wav(&dir.join(format!("obj{i}_audio.wav")), &scene.data.unmixed[i])?;
            write_voxel_grid(&dir.join(format!("obj{i}_voxels.vxg")), &sample.voxels)?;
            let mut csv = BufWriter::new(File::create(dir.join(format!("obj{i}_boxes.csv")))?);
            writeln!(csv, "frame,x,y,w,h")?;
            for (f, b) in sample.boxes.iter().enumerate() {
                writeln!(csv, "{f},{},{},{},{}", b.x, b.y, b.w, b.h)?;
            }
            for (f, frame) in sample.frames.iter().enumerate() {
                frame.write_pgm(&dir.join(format!("obj{i}_frame_{f:03}.pgm")))?;
            }
            for (f, spec_gram) in sample.spectrograms.iter().enumerate() {
                spec_gram.write_spg(&dir.join(format!("obj{i}_spec_{f:03}.spg")))?;
            }
        }
    }
    let mut m = BufWriter::new(File::create(root.join("manifest.txt"))?);
    writeln!(m, "voxav-dataset-v1")?;
    writeln!(m, "mode {}", spec.mode.name())?;
    writeln!(m, "fps {:?}", spec.fps)?;
    let views: Vec<&str> = spec
        .views
        .iter()
        .map(|v| match v {
            View::Front => "front",
            View::Side => "side",
            View::Top => "top",
            View::Rotated(_) => "rotated",
        })
        .collect();
    writeln!(m, "views {}", views.join(","))?;
    for scene in scenes {
        writeln!(
            m,
            "scene {} seed={} split={} frames={} objects={}",
            scene.index,
            scene.seed,
            scene.split.name(),
            scene.data.samples[0].frame_count(),
            scene.objects.len()
        )?;
        for (i, (obj, gain)) in scene.objects.iter().zip(&scene.gains).enumerate() {
            writeln!(
                m,
                "obj {} {} kind={} size={:?} material={} px={:?} py={:?} vx={:?} vy={:?} spin={:?} gain={:?}",
                scene.index,
                i,
                obj.kind.name(),
                obj.size_scale,
                obj.material.name(),
                obj.position.0,
                obj.position.1,
                obj.velocity.0,
                obj.velocity.1,
                obj.spin,
                gain
            )?;
        }
    }
    Ok(())
}

/// Generates and writes a dataset in one step.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<Vec<GeneratedScene>> {
    let scenes = generate_samples(spec)?;
    write_dataset(root, spec, &scenes)?;
    Ok(scenes)
}

/// One object's sequence as loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub scene: usize,
    pub object: usize,
    pub split: Split,
    pub seq: SampleSequence,
}

/// Scene audio as loaded back from disk (tests and tooling).
pub fn load_scene_audio(root: &Path, scene: usize, objects: usize) -> Result<(AudioClip, Vec<AudioClip>)> {
    let dir = scene_dir(root, scene);
    let mixed = read_wav(&dir.join("mixed.wav"))?;
    let unmixed = (0..objects)
        .map(|i| read_wav(&dir.join(format!("obj{i}_audio.wav"))))
        .collect::<Result<_>>()?;
    Ok((mixed, unmixed))
}

fn manifest_field<'a>(token: &'a str, key: &str, line_no: usize) -> Result<&'a str> {
    token.strip_prefix(key).and_then(|t| t.strip_prefix('=')).ok_or_else(|| Error::Parse {
        line: line_no,
        msg: format!("expected {key}=... in manifest, got '{token}'"),
    })
}

/// Loads every sample (optionally one split) from a dataset directory.
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<Vec<LoadedSample>> {
    let manifest = root.join("manifest.txt");
    if !manifest.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no dataset manifest at {}",
            manifest.display()
        )));
    }
    let reader = BufReader::new(File::open(&manifest)?);
    let mut entries: Vec<(usize, Split, usize, usize)> = Vec::new(); // scene, split, frames, objects
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = no + 1;
        if no == 0 {
            if line.trim() != "voxav-dataset-v1" {
                return Err(Error::format(format!(
                    "unrecognized manifest header '{line}'"
                )));
            }
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.first() {
            Some(&"scene") => {
                if tokens.len() < 6 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "scene line needs index, seed, split, frames, objects".into(),
                    });
                }
                let index: usize = tokens[1].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: "bad scene index".into(),
                })?;
                let split = Split::parse(manifest_field(tokens[3], "split", line_no)?)?;
                let frames: usize = manifest_field(tokens[4], "frames", line_no)?
                    .parse()
                    .map_err(|_| Error::Parse {
                        line: line_no,
                        msg: "bad frame count".into(),
                    })?;
                let objects: usize = manifest_field(tokens[5], "objects", line_no)?
                    .parse()
                    .map_err(|_| Error::Parse {
                        line: line_no,
                        msg: "bad object count".into(),
                    })?;
                entries.push((index, split, frames, objects));
            }
            _ => continue,
        }
    }

    let mut out = Vec::new();
    for (scene, scene_split, frames, objects) in entries {
        if let Some(want) = split {
            if scene_split != want {
                continue;
            }
        }
        let dir = scene_dir(root, scene);
        for i in 0..objects {
            let voxels = read_voxel_grid(&dir.join(format!("obj{i}_voxels.vxg")))?;
            let material = voxels.material.ok_or_else(|| {
                Error::format(format!("scene {scene} object {i} grid lacks a material"))
            })?;
            let mut frames_v = Vec::with_capacity(frames);
            let mut specs = Vec::with_capacity(frames);
            for f in 0..frames {
                frames_v.push(GrayImage::read_pgm(&dir.join(format!("obj{i}_frame_{f:03}.pgm")))?);
                specs.push(Spectrogram::read_spg(&dir.join(format!("obj{i}_spec_{f:03}.spg")))?);
            }
            let boxes = read_boxes(&dir.join(format!("obj{i}_boxes.csv")), frames)?;
            let seq = SampleSequence {
                frames: frames_v,
                spectrograms: specs,
                boxes,
                voxels,
                material,
            };
            seq.check_aligned()?;
            out.push(LoadedSample {
                scene,
                object: i,
                split: scene_split,
                seq,
            });
        }
    }
    Ok(out)
}

fn read_boxes(path: &Path, expect: usize) -> Result<Vec<BoundingBox>> {
    let reader = BufReader::new(File::open(path)?);
    let mut boxes = Vec::with_capacity(expect);
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if no == 0 {
            continue; // header
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: no + 1,
                msg: format!("box row needs 5 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: no + 1,
                msg: format!("bad box field '{s}'"),
            })
        };
        boxes.push(BoundingBox {
            x: parse(fields[1])?,
            y: parse(fields[2])?,
            w: parse(fields[3])?,
            h: parse(fields[4])?,
        });
    }
    if boxes.len() != expect {
        return Err(Error::format(format!(
            "expected {expect} boxes in {}, found {}",
            path.display(),
            boxes.len()
        )));
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use walk_bytes::tree_bytes;

    /// Collects every file's bytes keyed by relative path.
    mod walk_bytes {
        use std::collections::BTreeMap;
        use std::path::Path;

        pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
            let mut out = BTreeMap::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(dir) = stack.pop() {
                for entry in std::fs::read_dir(&dir).unwrap() {
                    let path = entry.unwrap().path();
                    if path.is_dir() {
                        stack.push(path);
                    } else {
                        let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                        out.insert(rel, std::fs::read(&path).unwrap());
                    }
                }
            }
            out
        }
    }

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            scenes: 2,
            seed: 42,
            mode: SampleMode::MultiFrame,
            frame_count: 10,
            objects_min: 1,
            objects_max: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_spec_and_seed() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate_dataset(dir1.path(), &spec).unwrap();
        generate_dataset(dir2.path(), &spec).unwrap();
        assert_eq!(tree_bytes(dir1.path()), tree_bytes(dir2.path()));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_samples(&tiny_spec()).unwrap();
        let b = generate_samples(&DatasetSpec {
            seed: 43,
            ..tiny_spec()
        })
        .unwrap();
        assert_ne!(a[0].objects, b[0].objects);
    }

    #[test]
    fn roundtrip_through_disk_preserves_structure() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let scenes = generate_dataset(dir.path(), &spec).unwrap();
        let loaded = load_dataset(dir.path(), None).unwrap();
        let want: usize = scenes.iter().map(|s| s.data.samples.len()).sum();
        assert_eq!(loaded.len(), want);
        for sample in &loaded {
            let src = &scenes[sample.scene].data.samples[sample.object];
            assert_eq!(sample.seq.frame_count(), src.frame_count());
            assert_eq!(sample.seq.boxes, src.boxes);
            assert_eq!(sample.seq.material, src.material);
            // Occupancies are binary, hence exact through the f32 payload.
            assert_eq!(sample.seq.voxels, src.voxels);
            // Frames are binary silhouettes, exact through 8-bit PGM.
            assert_eq!(sample.seq.frames, src.frames);
        }
    }

    #[test]
    fn split_filter_selects_subsets() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            scenes: 12,
            seed: 7,
            mode: SampleMode::SingleView,
            ..DatasetSpec::default()
        };
        let scenes = generate_dataset(dir.path(), &spec).unwrap();
        let all = load_dataset(dir.path(), None).unwrap();
        let train = load_dataset(dir.path(), Some(Split::Train)).unwrap();
        let want_train = scenes.iter().filter(|s| s.split == Split::Train).count();
        assert_eq!(train.len(), want_train);
        assert!(train.len() < all.len());
        for s in &train {
            assert_eq!(s.split, Split::Train);
        }
    }

    #[test]
    fn paired_scenes_share_silhouettes_and_differ_in_material_class() {
        let spec = DatasetSpec {
            scenes: 8,
            seed: 99,
            paired: true,
            mode: SampleMode::SingleView,
            ..DatasetSpec::default()
        };
        let scenes = generate_samples(&spec).unwrap();
        for pair in scenes.chunks(2) {
            let solid = &pair[0];
            let hollow = &pair[1];
            assert_eq!(
                solid.data.samples[0].frames[0], hollow.data.samples[0].frames[0],
                "paired frames must be identical"
            );
            assert!(spec.pair_solid_materials.contains(&solid.objects[0].material));
            assert!(spec.pair_hollow_materials.contains(&hollow.objects[0].material));
            let sv = solid.data.samples[0].voxels.occupied_count(0.5);
            let hv = hollow.data.samples[0].voxels.occupied_count(0.5);
            assert!(hv < sv, "hollow {hv} must occupy fewer voxels than solid {sv}");
        }
    }

    #[test]
    fn paired_generation_requires_even_single_view() {
        let bad = DatasetSpec {
            scenes: 3,
            paired: true,
            ..DatasetSpec::default()
        };
        assert!(generate_samples(&bad).is_err());
    }

    #[test]
    fn missing_manifest_is_a_missing_prerequisite() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), None),
            Err(Error::MissingPrerequisite(_))
        ));
    }

    #[test]
    fn mixed_wav_matches_unmixed_sum_after_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            scenes: 1,
            seed: 5,
            mode: SampleMode::MultiFrame,
            frame_count: 16,
            objects_min: 2,
            objects_max: 2,
            ..DatasetSpec::default()
        };
        let scenes = generate_dataset(dir.path(), &spec).unwrap();
        let (mixed, unmixed) = load_scene_audio(dir.path(), 0, 2).unwrap();
        assert_eq!(unmixed.len(), 2);
        assert_eq!(mixed.samples.len(), scenes[0].data.mixed.samples.len());
    }
}
