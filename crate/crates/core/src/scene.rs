//! Procedural multi-object scene generation with ground-truth masks.
//!
//! Two dataset kinds at desk scale: `towers` (stacks of colored rectangles
//! resting on the bottom edge, built so that higher-order correlations exist
//! by construction) and `bands_room` (sky/wall/floor bands plus sprites whose
//! bottom edges sit on the floor line). No anti-aliasing or lighting; the
//! point is correlation structure, not realism.
//!
//! Also home to the structural-accuracy oracle [`is_plausible_stack`], which
//! scores whether every labeled component is supported from below.

use crate::error::{Error, Result};
use crate::rng::stream_indexed;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Towers,
    BandsRoom,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Towers => write!(f, "towers"),
            DatasetKind::BandsRoom => write!(f, "bands_room"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub dataset_kind: DatasetKind,
    /// Inclusive [min, max] number of foreground objects.
    pub object_count_range: (usize, usize),
    /// RGB palette; object colors are drawn from here without replacement.
    pub palette: Vec<[u8; 3]>,
    pub rng_seed: u64,
}

pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [0, 130, 200],   // blue
    [255, 225, 25],  // yellow
    [245, 130, 48],  // orange
    [145, 30, 180],  // purple
    [70, 240, 240],  // cyan
    [240, 50, 230],  // magenta
];

impl SceneConfig {
    pub fn towers(size: usize, seed: u64) -> Self {
        SceneConfig {
            height: size,
            width: size,
            dataset_kind: DatasetKind::Towers,
            object_count_range: (2, 4),
            palette: DEFAULT_PALETTE.to_vec(),
            rng_seed: seed,
        }
    }

    pub fn bands_room(size: usize, seed: u64) -> Self {
        SceneConfig {
            height: size,
            width: size,
            dataset_kind: DatasetKind::BandsRoom,
            object_count_range: (2, 3),
            palette: DEFAULT_PALETTE.to_vec(),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::Contract("scenes must be square".into()));
        }
        if self.height < 16 {
            return Err(Error::Generation("canvas smaller than 16 px".into()));
        }
        let (lo, hi) = self.object_count_range;
        if lo < 1 || hi < lo {
            return Err(Error::Contract(format!(
                "bad object_count_range ({lo}, {hi})"
            )));
        }
        if self.palette.len() < hi {
            return Err(Error::Generation(format!(
                "palette has {} colors but up to {} objects requested",
                self.palette.len(),
                hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectMeta {
    /// Inclusive pixel bounds: (y0, x0, y1, x1).
    pub bbox: (usize, usize, usize, usize),
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneMeta {
    pub index: u64,
    pub object_count: usize,
    /// Objects in canonical order (bottom-to-top for towers, left-to-right
    /// for rooms); labelmap id m corresponds to `objects[m-1]`. Diagnostic
    /// only, never fed to the model.
    pub objects: Vec<ObjectMeta>,
    pub generator_seed: u64,
}

/// One dataset record: image in [0,1], integer labelmap (0 = background,
/// 1..=M object ids) and generator metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image: Array3<f32>,  // [H, W, 3]
    pub labelmap: Array2<u8>, // [H, W]
    pub meta: SceneMeta,
}

impl SceneRecord {
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.labelmap.iter().filter(|&&v| v > 0).count();
        fg as f64 / self.labelmap.len() as f64
    }
}

fn fill_rect(
    image: &mut Array3<f32>,
    labelmap: &mut Array2<u8>,
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    color: [u8; 3],
    label: u8,
) {
    for y in y0..=y1 {
        for x in x0..=x1 {
            for c in 0..3 {
                image[[y, x, c]] = color[c] as f32 / 255.0;
            }
            labelmap[[y, x]] = label;
        }
    }
}

/// Deterministic scene synthesis: a pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut rng = stream_indexed(cfg.rng_seed, &format!("scene:{}", cfg.dataset_kind), index);
    match cfg.dataset_kind {
        DatasetKind::Towers => generate_towers(cfg, index, &mut rng),
        DatasetKind::BandsRoom => generate_bands_room(cfg, index, &mut rng),
    }
}

fn generate_towers(
    cfg: &SceneConfig,
    index: u64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SceneRecord> {
    let (h, w) = (cfg.height, cfg.width);
    let scale = (h / 32).max(1);
    let min_h = 4 * scale;
    let max_h = 8 * scale;
    let (lo, hi) = cfg.object_count_range;
    let m = rng.gen_range(lo..=hi);
    if m * min_h + 2 > h || 12 * scale + 2 > w {
        return Err(Error::Generation(format!(
            "{}x{} canvas cannot hold {} stacked blocks",
            h, w, m
        )));
    }

    // Widths taper going up; heights split the vertical budget.
    let mut widths = Vec::with_capacity(m);
    let mut cur_w = rng.gen_range(12 * scale..=16 * scale.min(w / 2));
    for _ in 0..m {
        widths.push(cur_w);
        cur_w = cur_w.saturating_sub(rng.gen_range(1..=3) * scale).max(6 * scale);
    }
    let mut heights = Vec::with_capacity(m);
    let mut budget = (h - 2).min(m * max_h);
    for i in 0..m {
        let remaining_min = (m - i - 1) * min_h;
        let hi_h = (budget - remaining_min).min(max_h).max(min_h);
        let hm = rng.gen_range(min_h..=hi_h);
        heights.push(hm);
        budget -= hm;
    }
    // First block is the widest so heights[0] gets a bonus to keep single
    // blocks above the foreground-fraction floor.
    if m == 1 {
        heights[0] = heights[0].max(6 * scale);
    }

    // Color ids without replacement.
    let mut color_ids: Vec<usize> = (0..cfg.palette.len()).collect();
    for i in 0..m {
        let j = rng.gen_range(i..color_ids.len());
        color_ids.swap(i, j);
    }

    let mut image = Array3::<f32>::zeros((h, w, 3));
    let mut labelmap = Array2::<u8>::zeros((h, w));
    let mut objects = Vec::with_capacity(m);

    let half0 = widths[0] / 2;
    let mut center = rng.gen_range(half0 + 1..w - half0 - 1);
    let mut bottom = h - 1; // first block rests on the floor line
    for i in 0..m {
        let wd = widths[i];
        let ht = heights[i];
        let x0 = center - wd / 2;
        let x1 = x0 + wd - 1;
        let y1 = bottom;
        let y0 = y1 + 1 - ht;
        let color = cfg.palette[color_ids[i]];
        fill_rect(&mut image, &mut labelmap, y0, x0, y1, x1, color, (i + 1) as u8);
        objects.push(ObjectMeta {
            bbox: (y0, x0, y1, x1),
            color,
        });
        if i + 1 < m {
            // Next block sits directly on this one, horizontally supported.
            bottom = y0 - 1;
            let next_half = widths[i + 1] / 2;
            let jitter = (2 * scale) as isize;
            let lo_c = (x0 + next_half).max(next_half + 1);
            let hi_c = (x1 - next_half).min(w - next_half - 2);
            let proposed = center as isize + rng.gen_range(-jitter..=jitter);
            center = proposed.clamp(lo_c as isize, hi_c as isize) as usize;
        }
    }

    Ok(SceneRecord {
        image,
        labelmap,
        meta: SceneMeta {
            index,
            object_count: m,
            objects,
            generator_seed: cfg.rng_seed,
        },
    })
}

fn generate_bands_room(
    cfg: &SceneConfig,
    index: u64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SceneRecord> {
    let (h, w) = (cfg.height, cfg.width);
    let scale = (h / 32).max(1);
    let (lo, hi) = cfg.object_count_range;
    let m = rng.gen_range(lo..=hi);
    let sprite_min = 7 * scale;
    let sprite_max = 10 * scale;
    if m * (sprite_max + 1) > w {
        return Err(Error::Generation(format!(
            "{} sprites of width up to {} do not fit in width {}",
            m, sprite_max, w
        )));
    }

    let sky_rows = (h as f64 * rng.gen_range(0.20..0.40)) as usize;
    let wall_rows = (h as f64 * rng.gen_range(0.20..0.40)) as usize;
    let floor_start = sky_rows + wall_rows;
    // Correlated background colors: one family per band.
    let sky = [
        150 + rng.gen_range(0..60),
        180 + rng.gen_range(0..50),
        220 + rng.gen_range(0..36),
    ];
    let wall = [
        170 + rng.gen_range(0..60),
        140 + rng.gen_range(0..50),
        100 + rng.gen_range(0..40),
    ];
    let floor = [
        60 + rng.gen_range(0..40),
        50 + rng.gen_range(0..30),
        40 + rng.gen_range(0..30),
    ];

    let mut image = Array3::<f32>::zeros((h, w, 3));
    let mut labelmap = Array2::<u8>::zeros((h, w));
    fill_rect(&mut image, &mut labelmap, 0, 0, sky_rows.max(1) - 1, w - 1, sky, 0);
    fill_rect(&mut image, &mut labelmap, sky_rows, 0, floor_start - 1, w - 1, wall, 0);
    fill_rect(&mut image, &mut labelmap, floor_start, 0, h - 1, w - 1, floor, 0);

    let mut color_ids: Vec<usize> = (0..cfg.palette.len()).collect();
    for i in 0..m {
        let j = rng.gen_range(i..color_ids.len());
        color_ids.swap(i, j);
    }

    // Non-overlapping sprites standing on the floor line, labeled left to right.
    let mut placed: Vec<(usize, usize, usize)> = Vec::new(); // (x0, x1, size)
    let mut attempts = 0;
    while placed.len() < m {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Generation("could not place sprites without overlap".into()));
        }
        let size = rng.gen_range(sprite_min..=sprite_max);
        if size + 2 > w || size >= floor_start {
            return Err(Error::Generation("sprite larger than canvas region".into()));
        }
        let x0 = rng.gen_range(1..w - size - 1);
        let x1 = x0 + size - 1;
        if placed.iter().all(|&(px0, px1, _)| x1 + 1 < px0 || x0 > px1 + 1) {
            placed.push((x0, x1, size));
        }
    }
    placed.sort_by_key(|&(x0, _, _)| x0);

    let mut objects = Vec::with_capacity(m);
    for (i, &(x0, x1, size)) in placed.iter().enumerate() {
        let y1 = floor_start - 1; // bottom edge on the floor line
        let y0 = y1 + 1 - size;
        let color = cfg.palette[color_ids[i]];
        fill_rect(&mut image, &mut labelmap, y0, x0, y1, x1, color, (i + 1) as u8);
        objects.push(ObjectMeta {
            bbox: (y0, x0, y1, x1),
            color,
        });
    }

    Ok(SceneRecord {
        image,
        labelmap,
        meta: SceneMeta {
            index,
            object_count: m,
            objects,
            generator_seed: cfg.rng_seed,
        },
    })
}

// ---------------------------------------------------------------------------
// Structural plausibility oracle
// ---------------------------------------------------------------------------

/// True iff every labeled component (id >= 1) either touches the floor line
/// (bottom image row) or sits within a 1-px vertical gap above some other
/// component with horizontal overlap. Empty foreground is implausible.
///
/// Label ids are taken as the components; callers deriving labelmaps from
/// masks must split disconnected regions into distinct ids first.
pub fn is_plausible_stack(labelmap: &Array2<u8>) -> bool {
    let (h, w) = labelmap.dim();
    let max_label = *labelmap.iter().max().unwrap_or(&0) as usize;
    if max_label == 0 {
        return false;
    }
    // Per-label bottom profile: for each column, the lowest row occupied.
    let mut seen = vec![false; max_label + 1];
    for &v in labelmap.iter() {
        seen[v as usize] = true;
    }
    for label in 1..=max_label {
        if !seen[label] {
            continue;
        }
        let mut supported = false;
        'scan: for y in 0..h {
            for x in 0..w {
                if labelmap[[y, x]] as usize != label {
                    continue;
                }
                // Pixel at the component's lower boundary?
                let below_same = y + 1 < h && labelmap[[y + 1, x]] as usize == label;
                if below_same {
                    continue;
                }
                if y == h - 1 {
                    supported = true; // floor line
                    break 'scan;
                }
                for gap in 1..=2usize {
                    if y + gap < h {
                        let v = labelmap[[y + gap, x]] as usize;
                        if v != 0 && v != label {
                            supported = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if !supported {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Dataset I/O
// ---------------------------------------------------------------------------

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub config: SceneConfig,
    pub record_count: usize,
    /// First `train_count` records are the training split; the rest validate.
    pub train_count: usize,
}

fn scene_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("scene_{i:06}.png"))
}
fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:06}.png"))
}
fn meta_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("meta_{i:06}.json"))
}

/// Write records plus `index.json` into `dir` (created if missing).
pub fn write_dataset(
    records: &[SceneRecord],
    dir: &Path,
    config: &SceneConfig,
    train_count: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, rec) in records.iter().enumerate() {
        let (h, w) = rec.labelmap.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (rec.image[[y, x, 0]] * 255.0).round() as u8,
                    (rec.image[[y, x, 1]] * 255.0).round() as u8,
                    (rec.image[[y, x, 2]] * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(scene_path(dir, i))
            .map_err(|e| Error::io(scene_path(dir, i), e))?;
        let mut mask = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                mask.put_pixel(x as u32, y as u32, image::Luma([rec.labelmap[[y, x]]]));
            }
        }
        mask.save(mask_path(dir, i))
            .map_err(|e| Error::io(mask_path(dir, i), e))?;
        let meta = serde_json::to_string_pretty(&rec.meta)
            .map_err(|e| Error::io(meta_path(dir, i), e))?;
        std::fs::write(meta_path(dir, i), meta).map_err(|e| Error::io(meta_path(dir, i), e))?;
    }
    let index = DatasetIndex {
        schema_version: DATASET_SCHEMA_VERSION,
        config: config.clone(),
        record_count: records.len(),
        train_count: train_count.min(records.len()),
    };
    let index_json =
        serde_json::to_string_pretty(&index).map_err(|e| Error::io(dir.join("index.json"), e))?;
    std::fs::write(dir.join("index.json"), index_json)
        .map_err(|e| Error::io(dir.join("index.json"), e))?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`]. Lossless round trip.
pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<SceneRecord>)> {
    let index_file = dir.join("index.json");
    if !index_file.exists() {
        return Err(Error::Io {
            path: index_file,
            msg: "no index: directory is not a dataset".into(),
        });
    }
    let index: DatasetIndex = serde_json::from_str(
        &std::fs::read_to_string(&index_file).map_err(|e| Error::io(&index_file, e))?,
    )
    .map_err(|e| Error::io(&index_file, e))?;
    if index.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Io {
            path: index_file,
            msg: format!(
                "schema version {} unsupported (expected {})",
                index.schema_version, DATASET_SCHEMA_VERSION
            ),
        });
    }
    let mut records = Vec::with_capacity(index.record_count);
    for i in 0..index.record_count {
        for p in [scene_path(dir, i), mask_path(dir, i), meta_path(dir, i)] {
            if !p.exists() {
                return Err(Error::Io {
                    path: p,
                    msg: format!("record {i} listed in index but file is missing"),
                });
            }
        }
        let img = image::open(scene_path(dir, i))
            .map_err(|e| Error::io(scene_path(dir, i), e))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut image_arr = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    image_arr[[y, x, c]] = px[c] as f32 / 255.0;
                }
            }
        }
        let mask = image::open(mask_path(dir, i))
            .map_err(|e| Error::io(mask_path(dir, i), e))?
            .to_luma8();
        let mut labelmap = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                labelmap[[y, x]] = mask.get_pixel(x as u32, y as u32)[0];
            }
        }
        let meta: SceneMeta = serde_json::from_str(
            &std::fs::read_to_string(meta_path(dir, i)).map_err(|e| Error::io(meta_path(dir, i), e))?,
        )
        .map_err(|e| Error::io(meta_path(dir, i), e))?;
        records.push(SceneRecord {
            image: image_arr,
            labelmap,
            meta,
        });
    }
    Ok((index, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn towers_single_block_has_two_labels() {
        let mut cfg = SceneConfig::towers(32, 11);
        cfg.object_count_range = (1, 1);
        let rec = generate_scene(&cfg, 0).unwrap();
        let mut labels: Vec<u8> = rec.labelmap.iter().copied().collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::towers(32, 42);
        let a = generate_scene(&cfg, 17).unwrap();
        let b = generate_scene(&cfg, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 18).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn generated_towers_always_pass_stack_oracle() {
        let cfg = SceneConfig::towers(32, 7);
        for i in 0..200 {
            let rec = generate_scene(&cfg, i).unwrap();
            assert!(is_plausible_stack(&rec.labelmap), "scene {i} implausible");
        }
    }

    #[test]
    fn translated_top_block_fails_oracle() {
        let mut cfg = SceneConfig::towers(32, 3);
        cfg.object_count_range = (2, 2);
        let rec = generate_scene(&cfg, 4).unwrap();
        // Move the top block (label 2) up 3 px.
        let (h, w) = rec.labelmap.dim();
        let mut lm = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                match rec.labelmap[[y, x]] {
                    2 => lm[[y - 3, x]] = 2,
                    1 => lm[[y, x]] = 1,
                    _ => {}
                }
            }
        }
        assert!(!is_plausible_stack(&lm));
    }

    #[test]
    fn empty_foreground_is_implausible() {
        let lm = Array2::<u8>::zeros((8, 8));
        assert!(!is_plausible_stack(&lm));
    }

    #[test]
    fn single_grounded_block_is_plausible() {
        let mut lm = Array2::<u8>::zeros((8, 8));
        for x in 2..5 {
            lm[[7, x]] = 1;
            lm[[6, x]] = 1;
        }
        assert!(is_plausible_stack(&lm));
    }

    #[test]
    fn one_px_gap_counts_as_touching() {
        let mut lm = Array2::<u8>::zeros((10, 8));
        for x in 2..6 {
            lm[[9, x]] = 1;
            lm[[8, x]] = 1;
            // gap row 7
            lm[[6, x]] = 2;
        }
        assert!(is_plausible_stack(&lm));
        let mut lm2 = lm.clone();
        for x in 2..6 {
            lm2[[6, x]] = 0;
            lm2[[5, x]] = 2; // 2-px gap
        }
        assert!(!is_plausible_stack(&lm2));
    }

    #[test]
    fn labeled_pixels_match_palette_colors() {
        let cfg = SceneConfig::towers(32, 23);
        for i in 0..50 {
            let rec = generate_scene(&cfg, i).unwrap();
            let (h, w) = rec.labelmap.dim();
            for y in 0..h {
                for x in 0..w {
                    let l = rec.labelmap[[y, x]] as usize;
                    if l > 0 {
                        let color = rec.meta.objects[l - 1].color;
                        for c in 0..3 {
                            let diff =
                                (rec.image[[y, x, c]] - color[c] as f32 / 255.0).abs();
                            assert!(diff <= 2.0 / 255.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_in_bounds() {
        for kind in ["towers", "bands"] {
            let cfg = if kind == "towers" {
                SceneConfig::towers(32, 5)
            } else {
                SceneConfig::bands_room(32, 5)
            };
            for i in 0..200 {
                let rec = generate_scene(&cfg, i).unwrap();
                let f = rec.foreground_fraction();
                assert!((0.05..=0.6).contains(&f), "{kind} scene {i}: fraction {f}");
            }
        }
    }

    #[test]
    fn bands_room_sprites_rest_on_floor_line() {
        let cfg = SceneConfig::bands_room(32, 9);
        for i in 0..50 {
            let rec = generate_scene(&cfg, i).unwrap();
            // All sprite bottoms share one row: the floor line.
            let bottoms: Vec<usize> =
                rec.meta.objects.iter().map(|o| o.bbox.2).collect();
            assert!(bottoms.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn unsatisfiable_config_is_generation_error() {
        let mut cfg = SceneConfig::towers(16, 0);
        cfg.object_count_range = (6, 6);
        assert!(matches!(
            generate_scene(&cfg, 0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let cfg = SceneConfig::towers(32, 99);
        let recs: Vec<_> = (0..10).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&recs, dir.path(), &cfg, 8).unwrap();
        let (index, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(index.record_count, 10);
        assert_eq!(index.train_count, 8);
        assert_eq!(recs, back);
    }

    #[test]
    fn read_empty_dir_reports_no_index() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no index"), "{err}");
    }

    #[test]
    fn missing_record_file_is_named() {
        let cfg = SceneConfig::towers(32, 1);
        let recs: Vec<_> = (0..5).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&recs, dir.path(), &cfg, 4).unwrap();
        std::fs::remove_file(dir.path().join("scene_000003.png")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene_000003"), "{err}");
    }
}
