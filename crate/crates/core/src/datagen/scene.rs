//! Scene simulation: scripted 2-D sprite ballistics with impact events,
//! per-object unmixed audio, frame crops, and aligned spectrograms.

use super::shapes::{gen_shape, ShapeKind};
use crate::audio::{material_modal_params, mix_tracks, synthesize_impact, AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::material::Material;
use crate::signal::{segment_audio, SegmentMode, Spectrogram, MULTI_FPS, MULTI_WINDOW_SECS};
use crate::voxel::{project_axis, project_silhouette, View, VoxelGrid, GRID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Side of the square scene canvas in pixels.
pub const SCENE_SIZE: usize = 128;
/// Side of an object sprite (the grid's native projection).
pub const SPRITE_SIZE: usize = GRID;
/// Output frame side.
pub const FRAME_SIZE: usize = 88;
/// Impact clip length in seconds.
const IMPACT_SECS: f64 = 0.6;
/// Impulse gain per pixel/frame of impact speed.
const GAIN_PER_SPEED: f64 = 0.3;

/// One object's initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub size_scale: f64,
    pub material: Material,
    /// Top-left corner of the sprite box, scene pixels.
    pub position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Radians per frame of rotation about the vertical axis.
    pub spin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub objects: Vec<ObjectSpec>,
    pub frame_count: usize,
    pub fps: f64,
    pub rng_seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(Error::config(format!(
                "scenes hold 1..=3 objects, got {}",
                self.objects.len()
            )));
        }
        if self.frame_count < 10 {
            return Err(Error::config(format!(
                "frame_count must be >= 10 (the window size), got {}",
                self.frame_count
            )));
        }
        if self.fps <= 0.0 {
            return Err(Error::config("fps must be positive"));
        }
        let max_pos = (SCENE_SIZE - SPRITE_SIZE) as f64;
        for (i, obj) in self.objects.iter().enumerate() {
            let (x, y) = obj.position;
            if !(0.0..=max_pos).contains(&x) || !(0.0..=max_pos).contains(&y) {
                return Err(Error::config(format!(
                    "object {i} at ({x}, {y}) does not fit the {SCENE_SIZE}px frame"
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in scene pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Aligned multimodal record for one object: frame crops, per-frame
/// spectrograms, boxes, the ground-truth grid, and its material.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub frames: Vec<GrayImage>,
    pub spectrograms: Vec<Spectrogram>,
    pub boxes: Vec<BoundingBox>,
    pub voxels: VoxelGrid,
    pub material: Material,
}

impl SampleSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn check_aligned(&self) -> Result<()> {
        if self.frames.len() != self.spectrograms.len() || self.frames.len() != self.boxes.len() {
            return Err(Error::validation(format!(
                "misaligned sample: {} frames, {} spectrograms, {} boxes",
                self.frames.len(),
                self.spectrograms.len(),
                self.boxes.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactEvent {
    /// Frame index at which the impact lands.
    pub frame: usize,
    pub object: usize,
    pub gain: f64,
}

/// Everything a scene produces: one sample per object plus the scene audio.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub samples: Vec<SampleSequence>,
    pub unmixed: Vec<AudioClip>,
    pub mixed: AudioClip,
    pub impacts: Vec<ImpactEvent>,
}

/// Runs the scripted ballistics for `cfg` and renders every modality.
///
/// Objects reflect elastically off the frame borders; sprite-box overlap
/// between objects reverts the step and reflects both velocities along the
/// smaller-overlap axis. Each event synthesizes an impact with gain
/// proportional to the impact speed into the object's unmixed track.
pub fn gen_scene_sequence(cfg: &SceneConfig) -> Result<SceneData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n_obj = cfg.objects.len();
    let grids: Vec<VoxelGrid> = cfg
        .objects
        .iter()
        .map(|o| {
            let mut g = gen_shape(o.kind, o.size_scale)?;
            g.material = Some(o.material);
            Ok(g)
        })
        .collect::<Result<_>>()?;

    // Track long enough that every frame timestamp owns a full window;
    // round up so the last window still fits after sample quantization.
    let duration = (cfg.frame_count - 1) as f64 / cfg.fps + MULTI_WINDOW_SECS;
    let track_len = (duration * DEFAULT_SAMPLE_RATE as f64).ceil() as usize;
    let mut tracks: Vec<AudioClip> = (0..n_obj)
        .map(|_| AudioClip {
            samples: vec![0.0; track_len],
            sample_rate: DEFAULT_SAMPLE_RATE,
            norm_scale: 1.0,
        })
        .collect();
    let mut impacts = Vec::new();

    let mut pos: Vec<(f64, f64)> = cfg.objects.iter().map(|o| o.position).collect();
    let mut vel: Vec<(f64, f64)> = cfg.objects.iter().map(|o| o.velocity).collect();
    let mut frames_per_obj: Vec<Vec<GrayImage>> = vec![Vec::new(); n_obj];
    let mut boxes_per_obj: Vec<Vec<BoundingBox>> = vec![Vec::new(); n_obj];

    let max_pos = (SCENE_SIZE - SPRITE_SIZE) as f64;
    for frame in 0..cfg.frame_count {
        // Render the current state.
        for i in 0..n_obj {
            let angle = cfg.objects[i].spin * frame as f64;
            let sprite = if angle == 0.0 {
                project_axis(&grids[i], View::Front)
            } else {
                project_axis(&grids[i], View::Rotated(angle))
            };
            let (bx, by) = (pos[i].0.round() as usize, pos[i].1.round() as usize);
            let (tx, ty, tw, th) = sprite
                .nonzero_bbox()
                .ok_or_else(|| Error::config(format!("object {i} renders to an empty sprite")))?;
            let crop = sprite.crop(tx, ty, tw, th);
            frames_per_obj[i].push(crop.resize_square(FRAME_SIZE));
            boxes_per_obj[i].push(BoundingBox {
                x: bx + tx,
                y: by + ty,
                w: tw,
                h: th,
            });
        }
        if frame + 1 == cfg.frame_count {
            break;
        }

        // Advance one step; wall reflections emit impacts.
        let event_frame = frame + 1;
        let prev = pos.clone();
        for i in 0..n_obj {
            let mut hit_speed: f64 = 0.0;
            for axis in 0..2 {
                let (p, v) = if axis == 0 {
                    (&mut pos[i].0, &mut vel[i].0)
                } else {
                    (&mut pos[i].1, &mut vel[i].1)
                };
                *p += *v;
                if *p < 0.0 {
                    *p = -*p;
                    *v = -*v;
                    hit_speed = hit_speed.max(v.abs());
                } else if *p > max_pos {
                    *p = 2.0 * max_pos - *p;
                    *v = -*v;
                    hit_speed = hit_speed.max(v.abs());
                }
            }
            if hit_speed > 0.0 {
                record_impact(
                    &mut tracks[i],
                    &mut impacts,
                    &cfg.objects[i],
                    i,
                    event_frame,
                    hit_speed,
                    cfg.fps,
                    &mut rng,
                )?;
            }
        }
        // Pairwise sprite-box overlap: revert and separate.
        for a in 0..n_obj {
            for b in a + 1..n_obj {
                let dx = (pos[a].0 - pos[b].0).abs();
                let dy = (pos[a].1 - pos[b].1).abs();
                let overlap_x = SPRITE_SIZE as f64 - dx;
                let overlap_y = SPRITE_SIZE as f64 - dy;
                if overlap_x > 0.0 && overlap_y > 0.0 {
                    pos[a] = prev[a];
                    pos[b] = prev[b];
                    let rel = if overlap_x < overlap_y {
                        let r = (vel[a].0 - vel[b].0).abs();
                        vel[a].0 = -vel[a].0;
                        vel[b].0 = -vel[b].0;
                        r
                    } else {
                        let r = (vel[a].1 - vel[b].1).abs();
                        vel[a].1 = -vel[a].1;
                        vel[b].1 = -vel[b].1;
                        r
                    };
                    for i in [a, b] {
                        record_impact(
                            &mut tracks[i],
                            &mut impacts,
                            &cfg.objects[i],
                            i,
                            event_frame,
                            rel.max(0.2),
                            cfg.fps,
                            &mut rng,
                        )?;
                    }
                }
            }
        }
    }

    for track in &mut tracks {
        track.samples.truncate(track_len);
        track.normalize_peak();
    }
    let mixed = mix_tracks(&tracks, &vec![0.0; n_obj])?;

    let mut samples = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let mut spectrograms = segment_audio(&tracks[i], SegmentMode::Multi, cfg.fps)?;
        spectrograms.truncate(cfg.frame_count);
        if spectrograms.len() != cfg.frame_count {
            return Err(Error::config(format!(
                "audio segmentation yielded {} windows for {} frames",
                spectrograms.len(),
                cfg.frame_count
            )));
        }
        let seq = SampleSequence {
            frames: std::mem::take(&mut frames_per_obj[i]),
            spectrograms,
            boxes: std::mem::take(&mut boxes_per_obj[i]),
            voxels: grids[i].clone(),
            material: cfg.objects[i].material,
        };
        seq.check_aligned()?;
        samples.push(seq);
    }
    Ok(SceneData {
        samples,
        unmixed: tracks,
        mixed,
        impacts,
    })
}

#[allow(clippy::too_many_arguments)]
fn record_impact(
    track: &mut AudioClip,
    impacts: &mut Vec<ImpactEvent>,
    obj: &ObjectSpec,
    index: usize,
    frame: usize,
    speed: f64,
    fps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let jitter = rng.gen_range(0.9..1.1);
    let gain = (speed * GAIN_PER_SPEED * jitter).min(1.5);
    let model = material_modal_params(obj.material, obj.size_scale);
    let clip = synthesize_impact(&model, gain, IMPACT_SECS, track.sample_rate)?;
    track.add_at(&clip, frame as f64 / fps)?;
    impacts.push(ImpactEvent {
        frame,
        object: index,
        gain,
    });
    Ok(())
}

/// One-shot sample: silhouette views of a shape plus a single 3 s impact
/// spectrogram shared across views.
pub fn gen_single_view_sample(
    kind: ShapeKind,
    size_scale: f64,
    material: Material,
    views: &[View],
    impulse_gain: f64,
) -> Result<(SampleSequence, AudioClip)> {
    if views.is_empty() {
        return Err(Error::config("need at least one view"));
    }
    let mut grid = gen_shape(kind, size_scale)?;
    grid.material = Some(material);
    let model = material_modal_params(material, size_scale);
    let clip = synthesize_impact(&model, impulse_gain, 3.0, DEFAULT_SAMPLE_RATE)?;
    let spec = segment_audio(&clip, SegmentMode::Single, MULTI_FPS)?
        .pop()
        .expect("single mode yields one spectrogram");
    let mut frames = Vec::with_capacity(views.len());
    let mut boxes = Vec::with_capacity(views.len());
    for &view in views {
        let silhouette = project_silhouette(&grid, view, FRAME_SIZE);
        let (x, y, w, h) = silhouette
            .nonzero_bbox()
            .ok_or_else(|| Error::config("shape projects to an empty silhouette"))?;
        frames.push(silhouette.crop(x, y, w, h).resize_square(FRAME_SIZE));
        boxes.push(BoundingBox { x, y, w, h });
    }
    let seq = SampleSequence {
        spectrograms: vec![spec; views.len()],
        frames,
        boxes,
        voxels: grid,
        material,
    };
    seq.check_aligned()?;
    Ok((seq, clip))
}

/// Sliding 10-frame windows taking every `stride`-th frame, advancing the
/// window start by one frame. Too few frames yields an empty list.
pub fn augment_windows(seq: &SampleSequence, stride: usize, window: usize) -> Result<Vec<SampleSequence>> {
    if !(1..=3).contains(&stride) {
        return Err(Error::config(format!("stride must be 1, 2, or 3, got {stride}")));
    }
    if window == 0 {
        return Err(Error::config("window must be positive"));
    }
    let span = stride * (window - 1) + 1;
    let n = seq.frame_count();
    if n < span {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n - span + 1);
    for start in 0..=n - span {
        let idx: Vec<usize> = (0..window).map(|j| start + j * stride).collect();
        out.push(SampleSequence {
            frames: idx.iter().map(|&i| seq.frames[i].clone()).collect(),
            spectrograms: idx.iter().map(|&i| seq.spectrograms[i].clone()).collect(),
            boxes: idx.iter().map(|&i| seq.boxes[i]).collect(),
            voxels: seq.voxels.clone(),
            material: seq.material,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::DB_FLOOR;

    fn static_scene() -> SceneConfig {
        SceneConfig {
            objects: vec![ObjectSpec {
                kind: ShapeKind::SolidBox,
                size_scale: 0.8,
                material: Material::Granite,
                position: (40.0, 40.0),
                velocity: (0.0, 0.0),
                spin: 0.0,
            }],
            frame_count: 12,
            fps: MULTI_FPS,
            rng_seed: 7,
        }
    }

    #[test]
    fn static_object_stays_silent() {
        let data = gen_scene_sequence(&static_scene()).unwrap();
        assert!(data.impacts.is_empty());
        assert!(data.unmixed[0].samples.iter().all(|&s| s == 0.0));
        for spec in &data.samples[0].spectrograms {
            assert!(spec.values.iter().all(|&v| v == DB_FLOOR));
        }
    }

    #[test]
    fn same_seed_reproduces_the_scene_bitwise() {
        let mut cfg = static_scene();
        cfg.objects[0].velocity = (2.0, 1.0);
        cfg.objects[0].position = (90.0, 50.0);
        cfg.frame_count = 20;
        let a = gen_scene_sequence(&cfg).unwrap();
        let b = gen_scene_sequence(&cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.mixed, b.mixed);
        assert_eq!(a.impacts, b.impacts);
    }

    /// Event-time bookkeeping: one wall bounce, louder after than before.
    #[test]
    fn single_bounce_emits_one_impact() {
        let mut cfg = static_scene();
        cfg.objects[0].material = Material::Marble;
        cfg.objects[0].position = (90.0, 50.0);
        cfg.objects[0].velocity = (2.0, 0.0);
        cfg.frame_count = 16;
        let data = gen_scene_sequence(&cfg).unwrap();
        assert_eq!(data.impacts.len(), 1);
        let hit = data.impacts[0].frame;
        // 90 + 2k > 98 first at k = 5.
        assert_eq!(hit, 5);
        let specs = &data.samples[0].spectrograms;
        let mean = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            r.map(|i| specs[i].mean_db()).sum::<f64>() / n
        };
        let before = mean(0..hit);
        let after = mean(hit..specs.len());
        assert!(
            after > before,
            "mean dB after impact {after} must exceed before {before}"
        );
        // Windows span 0.03 s (1.33 frame hops), so the window just before
        // the impact frame already catches the onset; earlier ones are
        // exactly at the floor.
        assert_eq!(mean(0..hit - 1), DB_FLOOR);
    }

    #[test]
    fn colliding_pair_emits_impacts_for_both() {
        let cfg = SceneConfig {
            objects: vec![
                ObjectSpec {
                    kind: ShapeKind::Sphere,
                    size_scale: 0.8,
                    material: Material::Granite,
                    position: (10.0, 49.0),
                    velocity: (3.0, 0.0),
                    spin: 0.0,
                },
                ObjectSpec {
                    kind: ShapeKind::HollowBox,
                    size_scale: 0.8,
                    material: Material::Oak,
                    position: (80.0, 49.0),
                    velocity: (-3.0, 0.0),
                    spin: 0.0,
                },
            ],
            frame_count: 12,
            fps: MULTI_FPS,
            rng_seed: 3,
        };
        let data = gen_scene_sequence(&cfg).unwrap();
        let objs: Vec<usize> = data.impacts.iter().map(|e| e.object).collect();
        assert!(objs.contains(&0) && objs.contains(&1), "impacts: {objs:?}");
        // Unmixed tracks differ (different materials).
        assert_ne!(data.unmixed[0].samples, data.unmixed[1].samples);
    }

    #[test]
    fn mixed_equals_offset_sum_of_unmixed() {
        let cfg = SceneConfig {
            objects: vec![
                ObjectSpec {
                    kind: ShapeKind::SolidBox,
                    size_scale: 0.6,
                    material: Material::Marble,
                    position: (90.0, 20.0),
                    velocity: (2.5, 0.0),
                    spin: 0.0,
                },
                ObjectSpec {
                    kind: ShapeKind::Sphere,
                    size_scale: 0.5,
                    material: Material::Slate,
                    position: (20.0, 80.0),
                    velocity: (0.0, 2.0),
                    spin: 0.1,
                },
            ],
            frame_count: 24,
            fps: MULTI_FPS,
            rng_seed: 11,
        };
        let data = gen_scene_sequence(&cfg).unwrap();
        assert!(!data.impacts.is_empty());
        let len = data.mixed.samples.len();
        for i in 0..len {
            let manual: f64 = data.unmixed.iter().map(|t| t.samples.get(i).copied().unwrap_or(0.0)).sum();
            let recovered = data.mixed.samples[i] / data.mixed.norm_scale;
            assert!(
                (manual - recovered).abs() < 1e-6,
                "sample {i}: {manual} vs {recovered}"
            );
        }
    }

    #[test]
    fn boxes_stay_inside_and_cover_sprite_pixels() {
        let mut cfg = static_scene();
        cfg.objects[0].kind = ShapeKind::LBeam;
        cfg.objects[0].velocity = (-3.0, 2.5);
        cfg.objects[0].position = (5.0, 60.0);
        cfg.objects[0].spin = 0.12;
        cfg.frame_count = 30;
        let data = gen_scene_sequence(&cfg).unwrap();
        for (f, b) in data.samples[0].boxes.iter().enumerate() {
            assert!(b.x + b.w <= SCENE_SIZE && b.y + b.h <= SCENE_SIZE, "frame {f}");
            assert!(b.w > 0 && b.h > 0);
            let frame = &data.samples[0].frames[f];
            assert_eq!(frame.width, FRAME_SIZE);
            assert!(frame.pixels.iter().any(|&v| v > 0.0));
            assert!(frame.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn out_of_frame_start_is_config_error() {
        let mut cfg = static_scene();
        cfg.objects[0].position = (120.0, 20.0);
        assert!(matches!(gen_scene_sequence(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_view_sample_is_aligned() {
        let (seq, clip) = gen_single_view_sample(
            ShapeKind::ShellSphere,
            0.9,
            Material::Oak,
            &[View::Front],
            0.8,
        )
        .unwrap();
        assert_eq!(seq.frame_count(), 1);
        assert_eq!(clip.duration(), 3.0);
        assert!(seq.voxels.is_binary());
        assert_eq!(seq.voxels.material, Some(Material::Oak));
        // Impact at t = 0 makes the spectrogram non-silent.
        assert!(seq.spectrograms[0].mean_db() > DB_FLOOR);
    }

    #[test]
    fn five_views_share_one_sound() {
        let views = [
            View::Front,
            View::Side,
            View::Top,
            View::Rotated(0.7),
            View::Rotated(2.1),
        ];
        let (seq, _) =
            gen_single_view_sample(ShapeKind::TableLike, 0.8, Material::Slate, &views, 1.0).unwrap();
        assert_eq!(seq.frame_count(), 5);
        for s in &seq.spectrograms[1..] {
            assert_eq!(s, &seq.spectrograms[0]);
        }
    }

    #[test]
    fn window_augmentation_counts() {
        let mk = |n: usize| {
            let mut cfg = static_scene();
            cfg.frame_count = n;
            gen_scene_sequence(&cfg).unwrap().samples.remove(0)
        };
        assert_eq!(augment_windows(&mk(10), 1, 10).unwrap().len(), 1);
        let w12 = augment_windows(&mk(12), 1, 10).unwrap();
        assert_eq!(w12.len(), 3);
        let w19 = augment_windows(&mk(19), 2, 10).unwrap();
        assert_eq!(w19.len(), 1);
        assert_eq!(augment_windows(&mk(10), 3, 10).unwrap().len(), 0);
        // Stride-2 window over 19 frames takes indices 0, 2, ..., 18.
        assert_eq!(w19[0].frame_count(), 10);
    }
}
