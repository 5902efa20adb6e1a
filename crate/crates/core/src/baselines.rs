//! Comparison systems: the averaged singleton embedding, the constant
//! most-frequent guess, and the sliding subgrid window scan.

use crate::error::{invalid_arg, Result};
use crate::inference::{build_subset_table_with, decode_nearest_subset, SubsetTable};
use crate::labelset::LabelSet;
use crate::nn::tensor::{normalized, sq_dist};
use crate::render::Image;
use crate::train::Model;

/// Distance below which two embeddings are taken to share a class.
pub const TRADEM_THRESHOLD: f32 = 0.5;

/// Table whose entry for `T` is the normalized mean of the singleton
/// embeddings of `T`'s classes.
pub fn tradem_table(singletons: &[Vec<f32>], cap: usize) -> Result<SubsetTable> {
    let mut table = build_subset_table_with(singletons, cap, |a, b| Ok(vec![Vec::new(); a.len().min(b.len())]))?;
    for (set, v) in &mut table.entries {
        let els = set.canonical_elements();
        let mut sum = vec![0.0f32; singletons[0].len()];
        for &e in &els {
            for (s, x) in sum.iter_mut().zip(&singletons[e]) {
                *s += x;
            }
        }
        let n = els.len() as f32;
        sum.iter_mut().for_each(|s| *s /= n);
        *v = if els.len() == 1 { singletons[els[0]].clone() } else { normalized(&sum) };
    }
    Ok(table)
}

pub fn tradem_predict_set(
    model: &Model,
    references: &[&Image],
    query: &Image,
    cap: usize,
    topk: usize,
) -> Result<Vec<(LabelSet, f32)>> {
    let singles = model.embed(references)?;
    let table = tradem_table(&singles, cap)?;
    let q = model.embed(&[query])?.remove(0);
    decode_nearest_subset(&q, &table, topk)
}

/// Embedding distance and the containment decision `distance < 0.5`.
pub fn tradem_decision(a: &[f32], b: &[f32]) -> (bool, f32) {
    let d = sq_dist(a, b).sqrt();
    (d < TRADEM_THRESHOLD, d)
}

pub fn tradem_query(model: &Model, image_a: &Image, image_b: &Image) -> Result<(bool, f32)> {
    let e = model.embed(&[image_a, image_b])?;
    Ok(tradem_decision(&e[0], &e[1]))
}

/// Constant ranking: most frequent candidates first, ties in canonical
/// order. `frequencies` aligns with `candidates`; `None` means uniform.
pub fn mf_predict(candidates: &[LabelSet], frequencies: Option<&[usize]>) -> Result<Vec<LabelSet>> {
    if candidates.is_empty() {
        return invalid_arg("no candidate label sets");
    }
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    match frequencies {
        Some(f) if f.len() != candidates.len() => {
            return invalid_arg("frequencies must align with candidates");
        }
        Some(f) => idx.sort_by(|&a, &b| f[b].cmp(&f[a]).then_with(|| candidates[a].canonical_cmp(&candidates[b]))),
        None => idx.sort_by(|&a, &b| candidates[a].canonical_cmp(&candidates[b])),
    }
    Ok(idx.into_iter().map(|i| candidates[i]).collect())
}

/// Grid for an image of the given size: the longer side gets `max_grid`
/// cells, the shorter side proportionally fewer (at least one).
pub fn slidewin_grid(height: usize, width: usize, max_grid: usize) -> (usize, usize) {
    let long = height.max(width) as f64;
    let cells = |side: usize| ((max_grid as f64 * side as f64 / long).round() as usize).clamp(1, max_grid);
    (cells(height), cells(width))
}

/// Number of contiguous subgrids of an `rows x cols` grid.
pub fn window_count(rows: usize, cols: usize) -> usize {
    rows * (rows + 1) / 2 * (cols * (cols + 1) / 2)
}

/// Pixel bounds `[start, end)` of the cells along one axis.
fn cell_edges(len: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|i| i * len / cells).collect()
}

/// Every contiguous axis-aligned block of grid cells, resized to
/// `side x side`, in row-major order of (top, left, bottom, right).
pub fn slidewin_windows(image: &Image, rows: usize, cols: usize, side: usize) -> Result<Vec<Image>> {
    if rows == 0 || cols == 0 || rows > image.height || cols > image.width {
        return invalid_arg(format!("{rows}x{cols} grid on a {}x{} image", image.height, image.width));
    }
    let ys = cell_edges(image.height, rows);
    let xs = cell_edges(image.width, cols);
    let mut out = Vec::with_capacity(window_count(rows, cols));
    for top in 0..rows {
        for left in 0..cols {
            for bottom in top + 1..=rows {
                for right in left + 1..=cols {
                    let crop = image.crop(ys[top], xs[left], ys[bottom] - ys[top], xs[right] - xs[left]);
                    out.push(crop.resize(side, side));
                }
            }
        }
    }
    Ok(out)
}

/// Minimum embedding distance between any window and the reference.
pub fn slidewin_score(model: &Model, scene: &Image, reference: &Image, max_grid: usize) -> Result<f32> {
    let (rows, cols) = slidewin_grid(scene.height, scene.width, max_grid);
    let side = model.encoder.config.input_size;
    let windows = slidewin_windows(scene, rows, cols, side)?;
    let refs: Vec<&Image> = windows.iter().collect();
    let emb = model.embed(&refs)?;
    let r = model.embed(&[reference])?.remove(0);
    Ok(min_distance(&emb, &r))
}

pub fn min_distance(windows: &[Vec<f32>], reference: &[f32]) -> f32 {
    windows
        .iter()
        .map(|w| sq_dist(w, reference).sqrt())
        .fold(f32::INFINITY, f32::min)
}

/// Decision `score < threshold` with the score.
pub fn slidewin_query(
    model: &Model,
    scene: &Image,
    reference: &Image,
    threshold: f32,
    max_grid: usize,
) -> Result<(bool, f32)> {
    let score = slidewin_score(model, scene, reference, max_grid)?;
    Ok((score < threshold, score))
}

/// Threshold maximizing the accuracy of `score < threshold` on labeled
/// validation scores; the smallest such midpoint between distinct scores.
pub fn calibrate_distance_threshold(scores: &[f32], labels: &[bool]) -> Result<f32> {
    if scores.is_empty() || scores.len() != labels.len() {
        return invalid_arg("calibration needs aligned, nonempty scores and labels");
    }
    let mut sorted: Vec<f32> = scores.to_vec();
    sorted.sort_by(f32::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(sorted[sorted.len() - 1] + 1.0);
    let accuracy = |t: f32| scores.iter().zip(labels).filter(|(&s, &y)| (s < t) == y).count();
    let mut best = (accuracy(candidates[0]), candidates[0]);
    for &t in &candidates[1..] {
        let a = accuracy(t);
        if a > best.0 {
            best = (a, t);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Backbone;
    use crate::inference::decode_nearest_subset;
    use crate::labelset::enumerate_label_sets;
    use crate::render::{synth_glyph_store, GLYPH_SIZE};
    use crate::train::{ModelKind, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tradem_table_entries() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let singles: Vec<Vec<f32>> = (0..5)
            .map(|_| normalized(&(0..4).map(|_| r.gen_range(-1.0f32..1.0)).collect::<Vec<_>>()))
            .collect();
        let t = tradem_table(&singles, 3).unwrap();
        assert_eq!(t.len(), 25);
        for i in 0..5 {
            assert_eq!(t.get(&LabelSet::singleton(i, 5).unwrap()).unwrap(), singles[i].as_slice());
        }
        let pair = t.get(&LabelSet::from_elements(&[0, 3], 5).unwrap()).unwrap();
        let mid: Vec<f32> = singles[0].iter().zip(&singles[3]).map(|(a, b)| (a + b) / 2.0).collect();
        for (x, y) in pair.iter().zip(normalized(&mid)) {
            assert!((x - y).abs() < 1e-6);
        }
        let triple = t.get(&LabelSet::from_elements(&[1, 2, 4], 5).unwrap()).unwrap();
        let sum: Vec<f32> = (0..4).map(|j| singles[1][j] + singles[2][j] + singles[4][j]).collect();
        for (x, y) in triple.iter().zip(normalized(&sum)) {
            assert!((x - y).abs() < 1e-6);
        }
        // nearest-entry ranking by brute force
        for _ in 0..100 {
            let q = normalized(&(0..4).map(|_| r.gen_range(-1.0f32..1.0)).collect::<Vec<_>>());
            let got = decode_nearest_subset(&q, &t, 1).unwrap()[0].0;
            let mut best = &t.entries[0];
            for e in &t.entries {
                if sq_dist(&q, &e.1) < sq_dist(&q, &best.1) {
                    best = e;
                }
            }
            assert_eq!(got, best.0);
        }
    }

    #[test]
    fn tradem_decisions() {
        let a = [1.0f32, 0.0];
        assert_eq!(tradem_decision(&a, &a), (true, 0.0));
        assert!(!tradem_decision(&a, &[0.5, 0.0]).0);
        let (yes, d) = tradem_decision(&a, &[0.0, 1.0]);
        assert!(!yes && (d - 2f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn mf_is_constant_and_canonical() {
        let sets = enumerate_label_sets(5, 3).unwrap();
        let ranked = mf_predict(&sets, None).unwrap();
        assert_eq!(ranked, sets);
        let mut freq = vec![1; 25];
        freq[10] = 5;
        freq[3] = 5;
        let ranked = mf_predict(&sets, Some(&freq)).unwrap();
        assert_eq!(&ranked[..3], &[sets[3], sets[10], sets[0]]);
        assert_eq!(mf_predict(&sets[..1], None).unwrap(), vec![sets[0]]);
        assert!(mf_predict(&[], None).is_err());
    }

    #[test]
    fn window_counts_for_every_grid() {
        let img = Image::blank(40, 40);
        for rows in 1..=4 {
            for cols in 1..=4 {
                let w = slidewin_windows(&img, rows, cols, 8).unwrap();
                assert_eq!(w.len(), window_count(rows, cols));
                assert!(w.iter().all(|i| i.height == 8 && i.width == 8));
            }
        }
        assert_eq!(window_count(4, 4), 100);
        assert_eq!(window_count(2, 3), 18);
        assert_eq!(window_count(1, 1), 1);
        assert_eq!(slidewin_grid(128, 128, 4), (4, 4));
        assert_eq!(slidewin_grid(128, 192, 4), (3, 4));
        assert_eq!(slidewin_grid(10, 400, 4), (1, 4));
    }

    #[test]
    fn slidewin_finds_a_verbatim_glyph() {
        let mut cfg = TrainConfig::new(ModelKind::SingletonEmbedding);
        cfg.encoder.backbone = Backbone::SmallCnn { widths: [4, 4, 8, 8] };
        cfg.encoder.input_size = GLYPH_SIZE;
        let model = Model::new(cfg).unwrap();
        let store = synth_glyph_store(3, 1, 2).unwrap();
        let glyph = &store.exemplars(1)[0];
        let mut scene = Image::blank(2 * GLYPH_SIZE, 2 * GLYPH_SIZE);
        scene.paste(&store.exemplars(0)[0], 0, 0);
        scene.paste(glyph, GLYPH_SIZE, GLYPH_SIZE);
        let (yes, score) = slidewin_query(&model, &scene, glyph, 0.01, 4).unwrap();
        assert!(score < 1e-5 && yes);
        assert!(!slidewin_query(&model, &scene, glyph, 0.0, 4).unwrap().0);

        // more windows never raise the minimum
        let all = slidewin_windows(&scene, 4, 4, GLYPH_SIZE).unwrap();
        let refs: Vec<&Image> = all.iter().collect();
        let emb = model.embed(&refs).unwrap();
        let r = model.embed(&[glyph]).unwrap().remove(0);
        let mut prev = f32::INFINITY;
        for n in 1..=emb.len() {
            let m = min_distance(&emb[..n], &r);
            assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn calibration_maximizes_accuracy() {
        let scores = [0.1, 0.2, 0.3, 0.6, 0.7, 0.25];
        let labels = [true, true, true, false, false, false];
        let t = calibrate_distance_threshold(&scores, &labels).unwrap();
        let acc = scores.iter().zip(&labels).filter(|(&s, &y)| (s < t) == y).count();
        assert_eq!(acc, 5);
        assert!(t > 0.1 && t < 0.6);
        assert!(calibrate_distance_threshold(&[], &[]).is_err());
    }
}
