use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use refpipe::caption_metrics::{bleu4, cider, meteor, rouge_l, CaptionRecord};
use refpipe::curation::{clip_crop, compose_caption, mask_to_bbox, Interval};
use refpipe::diversity_analysis::{entropy_gain, inter_frame_diversity};
use refpipe::feature_store::FrameFeatureSequence;
use refpipe::geometry::{iou, BBox, TrackedBox, TrackingList};
use refpipe::jsonl::read_jsonl;
use refpipe::pipeline::{run_pipeline, write_bundle, PipelineConfig};
use refpipe::prompt_assembly::{refer_prompt, stage1_prompt, TemplateLibrary, VideoLayout};
use refpipe::roi_align::{roi_align_raw, RoiAlignConfig, RoiFeature};
use refpipe::roi_selection::{kmeans_runs, select_rois, SelectionConfig, SelectionMethod};
use refpipe::slicing::{spatial_pool, temporal_pool};
use refpipe::synthetic::{moving_square, static_square};
use refpipe::tracking::{reconcile, track, AnnotationSet, TrackConfig};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, d: usize) -> FrameFeatureSequence {
    let data = (0..t * h * w * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FrameFeatureSequence::new(t, h, w, d, data).unwrap()
}

fn pooling() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (t, h, w, d) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let seq = random_seq(&mut rng, t, h, w, d);
        let s = spatial_pool(&seq).map_err(|e| e.to_string())?;
        let tp = temporal_pool(&seq).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                for k in 0..d {
                    let mut acc = 0.0f64;
                    for f in 0..t {
                        acc += seq.get(f, y, x, k) as f64;
                    }
                    let got = s.data[(y * w + x) * d + k] as f64;
                    worst = worst.max((got - acc / t as f64).abs());
                }
            }
        }
        for f in 0..t {
            for k in 0..d {
                let mut acc = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        acc += seq.get(f, y, x, k) as f64;
                    }
                }
                let got = tp.data[f * d + k] as f64;
                worst = worst.max((got - acc / (h * w) as f64).abs());
            }
        }
        ensure(worst <= 1e-6, || format!("case {case}: error {worst:e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("200 tensors, max error {worst:.1e}, {secs:.2}s"))
}

/// Bilinear value at `(x, y)` as a sum over every cell of the tent kernel, after clamping to
/// the cell-centre lattice.
fn tent_sample(seq: &FrameFeatureSequence, x: f64, y: f64, k: usize) -> f64 {
    let u = (x - 0.5).clamp(0.0, (seq.grid_w() - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (seq.grid_h() - 1) as f64);
    let mut acc = 0.0;
    for cy in 0..seq.grid_h() {
        for cx in 0..seq.grid_w() {
            let w = (1.0 - (u - cx as f64).abs()).max(0.0) * (1.0 - (v - cy as f64).abs()).max(0.0);
            acc += w * seq.get(0, cy, cx, k) as f64;
        }
    }
    acc
}

fn dense_roi(seq: &FrameFeatureSequence, b: &BBox, g: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; seq.dim()];
    let n = (g * k) as f64;
    for d in 0..seq.dim() {
        let mut acc = 0.0;
        for i in 0..g * k {
            for j in 0..g * k {
                let x = b.x1() + (j as f64 + 0.5) / n * b.width();
                let y = b.y1() + (i as f64 + 0.5) / n * b.height();
                acc += tent_sample(seq, x, y, d);
            }
        }
        out[d] = acc / (n * n);
    }
    out
}

fn roialign() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (h, w, d) = (rng.gen_range(2..=8), rng.gen_range(2..=8), rng.gen_range(1..=4));
        let seq = random_seq(&mut rng, 1, h, w, d);
        let (x1, x2) = ordered(&mut rng, -0.5, w as f64 + 0.5);
        let (y1, y2) = ordered(&mut rng, -0.5, h as f64 + 0.5);
        let b = BBox::new(x1.max(0.0), y1.max(0.0), x2.min(w as f64), y2.min(h as f64)).unwrap();
        let cfg = RoiAlignConfig { grid_size: rng.gen_range(1..=4), samples_per_bin: rng.gen_range(1..=3), keep_grid: false };
        let (got, _) = roi_align_raw(&seq.slice_frame(0).unwrap(), &b, &cfg).map_err(|e| e.to_string())?;
        let want = dense_roi(&seq, &b, cfg.grid_size, cfg.samples_per_bin);
        for (g, o) in got.iter().zip(&want) {
            worst = worst.max((g - o).abs());
        }
        ensure(worst <= 1e-5, || format!("case {case}: error {worst:e}"))?;
    }

    let mut affine_worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let (a, bcoef, c) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let f = |x: f64, y: f64| a * x + bcoef * y + c;
        let seq = FrameFeatureSequence::from_fn(1, h, w, 1, |_, y, x, _| f(x as f64 + 0.5, y as f64 + 0.5) as f32).unwrap();
        let (x1, x2) = ordered(&mut rng, 0.5, w as f64 - 0.5);
        let (y1, y2) = ordered(&mut rng, 0.5, h as f64 - 0.5);
        let b = BBox::new(x1, y1, x2, y2).unwrap();
        let cfg = RoiAlignConfig { grid_size: rng.gen_range(1..=7), samples_per_bin: rng.gen_range(1..=4), keep_grid: false };
        let (got, _) = roi_align_raw(&seq.slice_frame(0).unwrap(), &b, &cfg).map_err(|e| e.to_string())?;
        let (cx, cy) = b.center();
        affine_worst = affine_worst.max((got[0] - f(cx, cy)).abs());
    }
    ensure(affine_worst <= 1e-6, || format!("affine error {affine_worst:e}"))?;
    Ok(format!("100 dense cases max error {worst:.1e}; affine fields max error {affine_worst:.1e}"))
}

fn ordered(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> (f64, f64) {
    loop {
        let (a, b) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        if (a - b).abs() > 0.25 {
            return (a.min(b), a.max(b));
        }
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum within-cluster sum of squares over every partition into exactly `m` groups.
fn best_partition(points: &[Vec<f64>], m: usize) -> f64 {
    fn cost(points: &[Vec<f64>], labels: &[usize], m: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for k in 0..m {
            let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            let mut mean = vec![0.0; d];
            for p in &members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v / members.len() as f64;
                }
            }
            total += members.iter().map(|p| sq(p, &mean)).sum::<f64>();
        }
        total
    }
    fn rec(i: usize, used: usize, labels: &mut Vec<usize>, points: &[Vec<f64>], m: usize, best: &mut f64) {
        if i == points.len() {
            if used == m {
                *best = best.min(cost(points, labels, m));
            }
            return;
        }
        if points.len() - i < m - used {
            return;
        }
        for k in 0..(used + 1).min(m) {
            labels.push(k);
            rec(i + 1, used.max(k + 1), labels, points, m, best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(0, 0, &mut Vec::new(), points, m, &mut best);
    best
}

fn kmeans_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut hits = 0;
    for trial in 0..100u64 {
        let n = rng.gen_range(3..=8);
        let m = rng.gen_range(1..=3);
        let d = rng.gen_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let runs = kmeans_runs(&points, m, 10, 100, trial).map_err(|e| e.to_string())?;
        for (r, run) in runs.iter().enumerate() {
            for w in run.trace.windows(2) {
                ensure(w[1] <= w[0] + 1e-9 * w[0].max(1.0), || {
                    format!("trial {trial} restart {r}: inertia rose {} -> {}", w[0], w[1])
                })?;
            }
        }
        let got = runs.iter().map(|r| r.inertia).fold(f64::INFINITY, f64::min);
        let opt = best_partition(&points, m);
        if (got - opt).abs() <= 1e-9 * opt.max(1.0) {
            hits += 1;
        }
    }
    ensure(hits >= 95, || format!("{hits}/100 optimal"))?;
    Ok(format!("{hits}/100 optimal, every trace non-increasing"))
}

const REGIME_DIM: usize = 16;
const REGIME_NOISE: f64 = 0.3;

fn regime_means(rng: &mut ChaCha8Rng) -> [Vec<f64>; 2] {
    let normal = Normal::new(0.0, 1.0).unwrap();
    [(); 2].map(|_| (0..REGIME_DIM).map(|_| normal.sample(rng)).collect())
}

fn regime_vector(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    let noise = Normal::new(0.0, REGIME_NOISE).unwrap();
    mean.iter().map(|m| m + noise.sample(rng)).collect()
}

/// Eight track RoIs: frames 0-3 near the first mean, frames 4-7 near the second.
fn two_regime_track(rng: &mut ChaCha8Rng, means: &[Vec<f64>; 2]) -> Vec<RoiFeature> {
    (0..8)
        .map(|t| {
            let v = regime_vector(rng, &means[usize::from(t >= 4)]);
            RoiFeature {
                source: TrackedBox::new(t, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()),
                vector: v.iter().map(|&x| x as f32).collect(),
                grid: None,
            }
        })
        .collect()
}

fn consecutive(rois: &[RoiFeature]) -> std::result::Result<f64, String> {
    let v: Vec<Vec<f64>> = rois.iter().map(|r| r.vector.iter().map(|&x| x as f64).collect()).collect();
    Ok(inter_frame_diversity(&v).map_err(|e| e.to_string())?.0)
}

fn selection_diversity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (mut over_uniform, mut over_random) = (0, 0);
    for trial in 0..100u64 {
        let means = regime_means(&mut rng);
        let rois = two_regime_track(&mut rng, &means);
        let score = |method| -> std::result::Result<f64, String> {
            let cfg = SelectionConfig { method, seed: trial, ..Default::default() };
            consecutive(&select_rois(&rois, &cfg).map_err(|e| e.to_string())?.rois)
        };
        let c = score(SelectionMethod::Clustering)?;
        over_uniform += usize::from(c >= score(SelectionMethod::Uniform)?);
        over_random += usize::from(c >= score(SelectionMethod::Random)?);
    }
    let detail = format!("clustering >= uniform in {over_uniform}/100 (need 90), >= random in {over_random}/100 (need 80)");
    ensure(over_uniform >= 90 && over_random >= 80, || detail.clone())?;
    Ok(detail)
}

fn track_entropy_gain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut gains = 0;
    for _ in 0..100 {
        let means = regime_means(&mut rng);
        let rois = two_regime_track(&mut rng, &means);
        let base: Vec<Vec<f64>> = (0..3).map(|_| regime_vector(&mut rng, &means[0])).collect();
        let mut augmented = base.clone();
        augmented.extend(rois.iter().map(|r| r.vector.iter().map(|&x| x as f64).collect()));
        gains += usize::from(entropy_gain(&base, &augmented, 32).map_err(|e| e.to_string())? > 0.0);
    }
    ensure(gains >= 95, || format!("entropy gain > 0 in {gains}/100"))?;
    Ok(format!("entropy gain > 0 in {gains}/100"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn record(refs: &[&str], hyp: &str) -> CaptionRecord {
    CaptionRecord { id: "x".into(), references: refs.iter().map(|s| s.to_string()).collect(), hypothesis: hyp.into() }
}

fn metric_oracles() -> Outcome {
    let corpus: Vec<CaptionRecord> = read_jsonl(data("toy_corpus.jsonl")).map_err(|e| e.to_string())?;
    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data("toy_expected.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let e = |k: &str| expected[k].as_f64().unwrap();
    let checks = [
        ("bleu4", bleu4(&corpus), e("bleu4")),
        ("rouge_l", rouge_l(&corpus), e("rouge_l")),
        ("cider", cider(&corpus), e("cider")),
        ("meteor", meteor(&corpus), e("meteor")),
    ];
    for (name, got, want) in checks {
        let got = got.map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-6, || format!("{name}: {got} vs {want}"))?;
    }
    let worked = rouge_l(&[record(&["a b c d"], "a c d")]).map_err(|e| e.to_string())?;
    ensure((worked - 83.56).abs() <= 1e-2, || format!("ROUGE worked example {worked}"))?;
    let same = vec![
        record(&["a man rides a horse on the beach"], "a man rides a horse on the beach"),
        record(&["the dog is running through the park"], "the dog is running through the park"),
    ];
    let (b, r) = (bleu4(&same).map_err(|e| e.to_string())?, rouge_l(&same).map_err(|e| e.to_string())?);
    ensure(b == 100.0 && r == 100.0, || format!("identical corpus BLEU {b}, ROUGE {r}"))?;
    Ok("toy corpus within 1e-6, ROUGE example within 1e-2, identical pairs 100".into())
}

fn slot_counts() -> Outcome {
    let lib = TemplateLibrary::default();
    let layout = VideoLayout::default();
    let s1 = stage1_prompt(&layout, &lib).map_err(|e| e.to_string())?.total_slots();
    let mut refer = Vec::new();
    for seed in 0..20 {
        refer.push(refer_prompt(&layout, 4, &lib, seed).map_err(|e| e.to_string())?.total_slots());
    }
    ensure(s1 == 356 && refer.iter().all(|&n| n == 361), || format!("stage1 {s1}, refer {refer:?}"))?;
    Ok("stage-1 356 slots, referring 361 slots".into())
}

fn tracker() -> Outcome {
    let (seq, truth) = moving_square(50, 56, 8);
    let cfg = TrackConfig::default();
    let list = track(&seq, TrackedBox::new(0, truth[0]), &cfg).map_err(|e| e.to_string())?;
    ensure(list.len() == 50, || format!("{} of 50 frames tracked", list.len()))?;
    let mut worst = 1.0f64;
    for e in &list {
        worst = worst.min(iou(&e.bbox, &truth[e.t]));
    }
    ensure(worst >= 0.7, || format!("min IoU {worst:.3}"))?;

    let (seq, truth) = static_square(30, 16, 8, 6);
    let seed = TrackedBox::new(12, truth[12]);
    let list = track(&seq, seed, &cfg).map_err(|e| e.to_string())?;
    ensure(list.len() == 30 && list.iter().all(|e| e.bbox == seed.bbox), || "static target drifted".into())?;
    Ok(format!("moving square min IoU {worst:.3} over 50 frames; static target held"))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
    BBox::new(x, y, x + rng.gen_range(0.5..6.0), y + rng.gen_range(0.5..6.0)).unwrap()
}

fn random_list(rng: &mut ChaCha8Rng, frames: usize, keep: f64) -> TrackingList {
    let mut entries = Vec::new();
    for t in 0..frames {
        if rng.gen_bool(keep) {
            entries.push(TrackedBox::new(t, random_box(rng)));
        }
    }
    TrackingList::new(entries).unwrap()
}

fn reconcile_audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let (mut kept, mut dropped) = (0, 0);
    for case in 0..1000 {
        let frames = rng.gen_range(1..=12);
        let a = random_list(&mut rng, frames, 0.8);
        let b = random_list(&mut rng, frames, 0.6);
        let gt = AnnotationSet::from_entries(random_list(&mut rng, frames, 0.5).into_entries());
        // nudge some candidates onto the annotation so both outcomes occur
        let a = TrackingList::new(
            a.iter()
                .map(|e| match gt.get(e.t) {
                    Some(g) if rng.gen_bool(0.4) => TrackedBox::new(e.t, g.translate(rng.gen_range(-1.0..1.0), 0.0).unwrap()),
                    _ => *e,
                })
                .collect(),
        )
        .unwrap();
        let tau = rng.gen_range(0.0..=1.0);
        let out = reconcile(&a, &b, &gt, tau).map_err(|e| e.to_string())?;
        let fail = |msg: String| format!("case {case} (tau {tau:.3}): {msg}");
        for e in &out {
            ensure(a.get(e.t).is_some() || b.get(e.t).is_some(), || fail(format!("frame {} invented", e.t)))?;
            if let Some(g) = gt.get(e.t) {
                ensure(iou(&e.bbox, g) >= tau, || fail(format!("frame {} survives below tau", e.t)))?;
                kept += 1;
            }
        }
        for t in 0..frames {
            let Some(g) = gt.get(t) else { continue };
            let best = [a.get(t), b.get(t)].into_iter().flatten().map(|c| iou(&c.bbox, g)).fold(None, |m: Option<f64>, v| {
                Some(m.map_or(v, |m| m.max(v)))
            });
            match (best, out.get(t)) {
                (Some(s), None) => {
                    ensure(s < tau, || fail(format!("frame {t} excluded with IoU {s} >= tau")))?;
                    dropped += 1;
                }
                (Some(s), Some(e)) => ensure(iou(&e.bbox, g) == s, || fail(format!("frame {t} kept the weaker box")))?,
                (None, Some(_)) => return Err(fail(format!("frame {t} has no candidate but survives"))),
                (None, None) => {}
            }
        }
    }
    Ok(format!("1000 cases, {kept} annotated entries kept at IoU >= tau, {dropped} excluded below tau"))
}

fn curation() -> Outcome {
    let cap = compose_caption("bear", "slowly", "walking").map_err(|e| e.to_string())?;
    ensure(cap == "bear is slowly walking.", || format!("caption {cap:?}"))?;
    let crops = clip_crop(60.0, 10.0, 3).map_err(|e| e.to_string())?;
    let want = [Interval { start: 0.0, end: 10.0 }, Interval { start: 25.0, end: 35.0 }, Interval { start: 50.0, end: 60.0 }];
    ensure(crops == want, || format!("clip_crop(60, 10, 3) = {crops:?}"))?;
    let b = mask_to_bbox(&[(1, 1), (1, 4), (6, 1)]).map_err(|e| e.to_string())?;
    ensure(b == BBox::new(1.0, 1.0, 7.0, 5.0).unwrap(), || format!("mask box {b:?}"))?;

    let (seq, truth) = moving_square(20, 28, 8);
    let cfg = PipelineConfig { keep_intermediates: true, ..Default::default() };
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        let bundle = run_pipeline(&cfg, &seq, TrackedBox::new(0, truth[0])).map_err(|e| e.to_string())?;
        write_bundle(&bundle, d.path(), true).map_err(|e| e.to_string())?;
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path()).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        let a = std::fs::read(dirs[0].path().join(n)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(n)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{n:?} differs between runs"))?;
    }
    Ok(format!("caption, clip_crop and mask examples hold; run bundle of {} files byte-identical", names.len()))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("pooling oracle", pooling),
        ("roialign oracle", roialign),
        ("kmeans optimality", kmeans_optimality),
        ("selection diversity ordering", selection_diversity),
        ("track entropy gain", track_entropy_gain),
        ("caption metric oracles", metric_oracles),
        ("prompt slot counts", slot_counts),
        ("baseline tracker", tracker),
        ("reconciliation audit", reconcile_audit),
        ("curation and reproducible run", curation),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
