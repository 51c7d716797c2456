//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p draft-attention --test acceptance`.

mod common;

use std::time::Instant;

use common::*;
use draft_attention::bounds::LogitAnalysis;
use draft_attention::harness::config::{DataMode, Preset};
use draft_attention::harness::synth::{generate, Grid};
use draft_attention::harness::verify::{instances, run_bound_suite, BoundSuiteConfig};
use draft_attention::mask::keep_count;
use draft_attention::sparse::{dense_masked_attention, flops_for_kept};
use draft_attention::{
    block_sparse_attention, draft_logits, draft_sparse_attention, flops_count, full_attention,
    gen_reorder_index, gen_restore_index, logits, permute_rows, AttnScale, DraftPair, LatentLayout,
    Matrix, PipelineOptions, PoolMode, RegionMask, Scalar,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn suite_config() -> BoundSuiteConfig {
    BoundSuiteConfig {
        trials: 1000,
        n_max: 1024,
        ..BoundSuiteConfig::default()
    }
}

/// Reordered f64 rows of `x` following the sort-based token order.
fn reorder_rows(x: &[Vec<f64>], order: &[usize]) -> Vec<Vec<f64>> {
    order.iter().map(|&i| x[i].clone()).collect()
}

struct OracleInstance {
    s: Vec<Vec<f64>>,
    s_tilde: Vec<Vec<f64>>,
    delta: f64,
    p: usize,
}

fn oracle_instance(layout: &LatentLayout, q: &Matrix<f64>, k: &Matrix<f64>) -> OracleInstance {
    let order = reorder_by_sort(
        layout.frames(),
        layout.height(),
        layout.width(),
        layout.patch_h(),
        layout.patch_w(),
    );
    let qr = reorder_rows(&to_f64(q), &order);
    let kr = reorder_rows(&to_f64(k), &order);
    let s = logits_oracle(&qr, &kr);
    let p = layout.patch_h() * layout.patch_w();
    let s_tilde = block_means(&s, p);
    let mut delta = 0.0f64;
    for (u, row) in s.iter().enumerate() {
        for (v, &x) in row.iter().enumerate() {
            delta = delta.max((x - s_tilde[u / p][v / p]).abs());
        }
    }
    OracleInstance {
        s,
        s_tilde,
        delta,
        p,
    }
}

fn criterion1() -> Outcome {
    let cfg = suite_config();
    let insts = instances(&cfg).unwrap();
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    let mut disagreements = 0;
    for inst in &insts {
        let layout = inst.layout();
        let data = generate::<f64>(&Grid::from(&layout), inst.d, inst.mode, inst.seed).unwrap();
        let o = oracle_instance(&layout, &data.q, &data.k);
        let n = layout.n() as f64;
        let err = o
            .s
            .iter()
            .enumerate()
            .flat_map(|(u, row)| {
                let st = &o.s_tilde;
                let p = o.p;
                row.iter().enumerate().map(move |(v, &x)| (x - st[u / p][v / p]).powi(2))
            })
            .sum::<f64>()
            .sqrt();
        let bound = o.delta * n;
        let slack = bound - err;
        min_slack = min_slack.min(slack);
        if slack < 0.0 {
            violations += 1;
        }
        let lib = LogitAnalysis::new(&data.q, &data.k, &layout).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        if !rel(lib.delta, o.delta) || !rel(lib.draft_error(), err) {
            disagreements += 1;
        }
    }
    let (_, summary) = run_bound_suite(&BoundSuiteConfig {
        keep_ratios: vec![0.5],
        ..cfg
    })
    .unwrap();
    Outcome {
        pass: violations == 0 && min_slack >= 0.0 && disagreements == 0 && summary.draft_failures == 0,
        detail: format!(
            "{} instances, {violations} oracle violations, min slack {min_slack:.3e}, \
             {disagreements} library/oracle disagreements, library failures {}",
            insts.len(),
            summary.draft_failures
        ),
    }
}

fn criterion2() -> Outcome {
    let cfg = suite_config();
    let insts = instances(&cfg).unwrap();
    let ratios = [0.1, 0.25, 0.5];
    let (mut checks, mut frob_fail, mut point_fail) = (0, 0, 0);
    let mut worst_ratio = 0.0f64;
    for inst in &insts {
        let layout = inst.layout();
        let data = generate::<f64>(&Grid::from(&layout), inst.d, inst.mode, inst.seed).unwrap();
        let o = oracle_instance(&layout, &data.q, &data.k);
        let g = o.s_tilde.len();
        let n = layout.n() as f64;
        let flat: Vec<f64> = o.s_tilde.iter().flatten().copied().collect();
        let mut order: Vec<usize> = (0..g * g).collect();
        order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
        for r in ratios {
            let kept_n = ((r * (g * g) as f64) - 1e-9).ceil().max(1.0) as usize;
            let mut kept = vec![false; g * g];
            order[..kept_n].iter().for_each(|&f| kept[f] = true);
            let t = flat[order[kept_n - 1]];
            let (mut err_sq, mut dropped_max) = (0.0f64, 0.0f64);
            for (u, row) in o.s.iter().enumerate() {
                for (v, &x) in row.iter().enumerate() {
                    if !kept[(u / o.p) * g + v / o.p] {
                        err_sq += x * x;
                        dropped_max = dropped_max.max(x.abs());
                    }
                }
            }
            let bound = n * (o.delta + t) * (1.0 - r).sqrt();
            checks += 1;
            if err_sq.sqrt() > bound * (1.0 + 1e-12) {
                frob_fail += 1;
                worst_ratio = worst_ratio.max(err_sq.sqrt() / bound);
            }
            if kept_n < g * g && dropped_max > (o.delta + t) * (1.0 + 1e-12) {
                point_fail += 1;
            }
        }
    }
    let (_, summary) = run_bound_suite(&cfg).unwrap();
    let agree = summary.mask_failures == frob_fail && summary.pointwise_failures == point_fail;
    Outcome {
        pass: frob_fail == 0 && point_fail == 0 && agree,
        detail: format!(
            "{checks} (instance, r) checks, Frobenius bound violated in {frob_fail} \
             (worst error/bound {worst_ratio:.4}), pointwise |S_uv| <= delta + t violated in \
             {point_fail}; library counts {}/{} (corrected-bound failures {})",
            summary.mask_failures, summary.pointwise_failures, summary.corrected_failures
        ),
    }
}

fn random_mask(g: usize, rng: &mut rand_chacha::ChaCha8Rng) -> RegionMask {
    let density: f64 = rng.gen_range(0.05..1.0);
    let bits: Vec<bool> = (0..g * g).map(|_| rng.gen_bool(density)).collect();
    RegionMask::from_bits(g, bits, density, f64::NAN).unwrap()
}

fn oracle_trial<T: Scalar>(layout: &LatentLayout, d: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = layout.n();
    let q = uniform::<T>(n, d, -2.0, 2.0, &mut rng);
    let k = uniform::<T>(n, d, -2.0, 2.0, &mut rng);
    let v = uniform::<T>(n, d, -1.0, 1.0, &mut rng);
    let mask = random_mask(layout.regions(), &mut rng);
    let scale = AttnScale::for_head_dim(d);
    let out = block_sparse_attention(&q, &k, &v, &mask, layout, scale).unwrap();
    let p = layout.region_size();
    let want = attention_oracle(&to_f64(&q), &to_f64(&k), &to_f64(&v), scale.value(), |u, w| {
        mask.is_kept(u / p, w / p)
    });
    let lifted = mask.lift(layout).unwrap();
    let dense = dense_masked_attention(&q, &k, &v, &lifted, scale, None).unwrap();
    max_abs_diff(&out, &want).max(max_abs_diff(&dense, &want))
}

fn criterion3() -> Outcome {
    let mut rng = rng(3);
    let patches = [(1, 1), (2, 2), (2, 4), (4, 4), (4, 8)];
    let (mut trials, mut worst32, mut worst64) = (0, 0.0f64, 0.0f64);
    while trials < 240 {
        let (ph, pw) = patches[rng.gen_range(0..patches.len())];
        let frames = rng.gen_range(1..=3);
        let layout = LatentLayout::new(
            frames,
            ph * rng.gen_range(1..=4),
            pw * rng.gen_range(1..=4),
            ph,
            pw,
        )
        .unwrap();
        if layout.n() > 1024 {
            continue;
        }
        let d = [4, 16, 32][rng.gen_range(0..3)];
        let seed = rng.gen();
        worst32 = worst32.max(oracle_trial::<f32>(&layout, d, seed));
        worst64 = worst64.max(oracle_trial::<f64>(&layout, d, seed));
        trials += 1;
    }
    Outcome {
        pass: worst32 <= 1e-5 && worst64 <= 1e-12,
        detail: format!(
            "{trials} (layout, mask) pairs per precision, max abs error single {worst32:.2e} \
             (tol 1e-5), double {worst64:.2e} (tol 1e-12)"
        ),
    }
}

fn criterion4() -> Outcome {
    let (mut cases, mut worst32, mut worst64) = (0, 0.0f64, 0.0f64);
    for (ph, pw) in [(2, 4), (3, 2)] {
        for (i, layout) in layout_grid(ph, pw).into_iter().enumerate() {
            let n = layout.n();
            let d = 16;
            let mut rng = rng(400 + i as u64);
            let q = uniform::<f64>(n, d, -2.0, 2.0, &mut rng);
            let k = uniform::<f64>(n, d, -2.0, 2.0, &mut rng);
            let v = uniform::<f64>(n, d, -1.0, 1.0, &mut rng);
            let opts = PipelineOptions::default();
            let scale = AttnScale::for_head_dim(d);
            let a = draft_sparse_attention(&q, &k, &v, &layout, 0.0, &opts).unwrap();
            let b = full_attention(&q, &k, &v, scale).unwrap();
            worst64 = worst64.max(a.max_abs_diff(&b).unwrap());
            let (q, k, v) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
            let a = draft_sparse_attention(&q, &k, &v, &layout, 0.0, &opts).unwrap();
            let b = full_attention(&q, &k, &v, scale).unwrap();
            worst32 = worst32.max(a.max_abs_diff(&b).unwrap());
            cases += 1;
        }
    }
    Outcome {
        pass: worst32 <= 1e-5 && worst64 <= 1e-5,
        detail: format!(
            "{cases} layouts, max abs difference single {worst32:.2e}, double {worst64:.2e} (tol 1e-5)"
        ),
    }
}

fn criterion5() -> Outcome {
    let mut failures = Vec::new();
    let mut layouts = 0;
    for (ph, pw) in [(1, 1), (2, 2), (2, 4), (3, 2), (8, 16)] {
        for layout in layout_grid(ph, pw) {
            layouts += 1;
            let n = layout.n();
            let pi = gen_reorder_index(&layout);
            let mut seen = vec![false; n];
            let bijective = pi.forward().iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
            let restore = gen_restore_index(&pi).unwrap();
            let roundtrip = (0..n).all(|i| pi.forward()[restore.forward()[i]] == i)
                && (0..n).all(|i| restore.forward()[pi.forward()[i]] == i);
            let p = ph * pw;
            let (h, w) = (layout.height(), layout.width());
            let key = |i: usize| {
                let y = (i % (h * w)) / w;
                (i / (h * w), y / ph, (i % w) / pw)
            };
            let contiguous = pi
                .forward()
                .chunks(p)
                .all(|blk| blk.iter().all(|&i| key(i) == key(blk[0])));
            let sorted = pi.forward() == reorder_by_sort(layout.frames(), h, w, ph, pw).as_slice();
            if !(bijective && roundtrip && contiguous && sorted) {
                failures.push(format!("{layout:?}"));
            }
        }
    }
    let traced = gen_reorder_index(&LatentLayout::new(1, 2, 4, 2, 2).unwrap());
    let hand = traced.forward() == [0, 1, 4, 5, 2, 3, 6, 7];
    Outcome {
        pass: failures.is_empty() && hand,
        detail: format!(
            "{layouts} layouts, {} failing; hand-traced F=1,H=2,W=4,h=2,w=2 -> {:?}",
            failures.len(),
            traced.forward()
        ),
    }
}

fn criterion6() -> Outcome {
    let mut worst = 0.0f64;
    let mut trials = 0;
    for seed in 0..100u64 {
        let mut rng = rng(600 + seed);
        let (ph, pw) = [(2, 2), (2, 4), (4, 4), (8, 16)][seed as usize % 4];
        let layout = LatentLayout::new(
            rng.gen_range(1..=2),
            ph * rng.gen_range(1..=3),
            pw * rng.gen_range(1..=3),
            ph,
            pw,
        )
        .unwrap();
        let d = [4, 8, 16][rng.gen_range(0..3)];
        let n = layout.n();
        let q = uniform::<f32>(n, d, -1.0, 1.0, &mut rng);
        let k = uniform::<f32>(n, d, -1.0, 1.0, &mut rng);
        let pi = gen_reorder_index(&layout);
        let (qr, kr) = (permute_rows(&q, &pi).unwrap(), permute_rows(&k, &pi).unwrap());
        let unit = AttnScale::unit(d);
        let s = logits(&qr, &kr, unit).unwrap();
        let pair = DraftPair::from_reordered(&qr, &kr, layout, PoolMode::Average).unwrap();
        let draft = draft_logits(&pair, unit).unwrap();
        let means = block_means(&to_f64(&s), layout.region_size());
        worst = worst.max(max_abs_diff(&draft, &means));
        trials += 1;
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!("{trials} single-precision instances, max abs difference {worst:.2e} (tol 1e-5)"),
    }
}

/// Counts FLOPs by walking the work the pipeline performs.
fn counting_oracle(layout: &LatentLayout, d: usize, kept: usize) -> (u64, u64, u64, u64) {
    let (n, g, p) = (layout.n() as u64, layout.regions() as u64, layout.region_size() as u64);
    let d = d as u64;
    let dot = 2 * d;
    let full = n * n * dot;
    let draft = g * g * dot;
    let mut sparse_logits = 0u64;
    let mut sparse_av = 0u64;
    for _block in 0..kept {
        sparse_logits += p * p * dot;
        sparse_av += p * d * p * 2;
    }
    (full, draft, sparse_logits, sparse_av)
}

fn criterion7() -> Outcome {
    let preset = Preset::P768.layout(4);
    let rep = flops_count(&preset, 64, 0.9, 0).unwrap();
    let overhead_exact = rep.p == 128 && rep.overhead_ratio == 1.0 / 16384.0;
    let kept = keep_count(0.1, rep.g * rep.g);
    let per_stage = rep.sparse_logits_flops == (kept * 128 * 128 * 64 * 2) as u64
        && rep.sparse_av_flops == rep.sparse_logits_flops;

    let mut rng = rng(7);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (ph, pw) = [(1, 2), (2, 2), (2, 4), (4, 4), (8, 16)][rng.gen_range(0..5)];
        let layout = LatentLayout::new(
            rng.gen_range(1..=4),
            ph * rng.gen_range(1..=6),
            pw * rng.gen_range(1..=6),
            ph,
            pw,
        )
        .unwrap();
        let d = [8, 16, 64, 128][rng.gen_range(0..4)];
        let sparsity: f64 = rng.gen_range(0.0..0.99);
        let g = layout.regions();
        let extras = rng.gen_range(0..=g);
        let got = flops_count(&layout, d, sparsity, extras).unwrap();
        let kept = (((1.0 - sparsity) * (g * g) as f64 - 1e-9).ceil() as usize + extras).min(g * g);
        let (full, draft, sl, sa) = counting_oracle(&layout, d, kept);
        let ok = got.kept_count == kept
            && got.full_logits_flops == full
            && got.full_av_flops == full
            && got.draft_flops == draft
            && got.sparse_logits_flops == sl
            && got.sparse_av_flops == sa
            && got == flops_for_kept(&layout, d, kept);
        if !ok {
            mismatches += 1;
        }
    }
    Outcome {
        pass: overhead_exact && per_stage && mismatches == 0,
        detail: format!(
            "p=128 overhead {} (1/16384 exact: {overhead_exact}), per-stage sparse FLOPs \
             kept*p^2*d*2: {per_stage}, counting-oracle mismatches {mismatches}/50",
            rep.overhead_ratio
        ),
    }
}

fn criterion8() -> Outcome {
    let layout = Preset::P768.layout(4);
    let d = 64;
    let data = generate::<f32>(&Grid::from(&layout), d, DataMode::Gaussian, 8).unwrap();
    let opts = PipelineOptions::default();
    let reps = 5;
    let mut medians = Vec::new();
    for sparsity in [0.0, 0.55, 0.75, 0.9] {
        let mut times: Vec<f64> = (0..reps)
            .map(|_| {
                let clock = Instant::now();
                let out = draft_sparse_attention(&data.q, &data.k, &data.v, &layout, sparsity, &opts).unwrap();
                std::hint::black_box(out);
                clock.elapsed().as_secs_f64()
            })
            .collect();
        medians.push(draft_attention::harness::bench::median(&mut times));
    }
    let speedup = medians[0] / medians[3];
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    Outcome {
        pass: speedup >= 2.5 && monotone,
        detail: format!(
            "n={}, threads={}, median seconds at sparsity 0/0.55/0.75/0.9: {:.3}/{:.3}/{:.3}/{:.3}, \
             speedup {speedup:.2}x (need >= 2.5), non-increasing: {monotone}",
            layout.n(),
            rayon::current_num_threads(),
            medians[0],
            medians[1],
            medians[2],
            medians[3]
        ),
    }
}

fn criterion9() -> Outcome {
    let layout = LatentLayout::new(2, 8, 16, 2, 4).unwrap();
    let d = 16;
    let seeds = 20;
    let (mut smooth, mut gauss, mut wins) = (0.0, 0.0, 0);
    for seed in 0..seeds {
        let delta = |mode| {
            let data = generate::<f64>(&Grid::from(&layout), d, mode, 900 + seed).unwrap();
            oracle_instance(&layout, &data.q, &data.k).delta
        };
        let (s, g) = (delta(DataMode::Smooth), delta(DataMode::Gaussian));
        smooth += s;
        gauss += g;
        if s < g {
            wins += 1;
        }
    }
    let (smooth, gauss) = (smooth / seeds as f64, gauss / seeds as f64);
    Outcome {
        pass: smooth < gauss,
        detail: format!(
            "{seeds} paired seeds, mean delta smooth {smooth:.4} vs gaussian {gauss:.4}, \
             smooth smaller in {wins}/{seeds} pairs"
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("draft-pooling Frobenius bound", criterion1),
        ("masking Frobenius and pointwise bounds", criterion2),
        ("sparse executor vs dense masked oracle", criterion3),
        ("pipeline at sparsity 0 equals full attention", criterion4),
        ("reordering permutation properties", criterion5),
        ("draft logits equal block means of full logits", criterion6),
        ("FLOPs accounting", criterion7),
        ("desk-scale speedup on the 768p preset", criterion8),
        ("smooth inputs give smaller delta than gaussian", criterion9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let clock = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "[{verdict}] criterion {id} [PRIMARY] {name}: {} ({:.1}s)",
            out.detail,
            clock.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
