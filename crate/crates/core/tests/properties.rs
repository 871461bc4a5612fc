use std::io::Write;

use gdr::affinity::{calibrate_perplexity, calibrate_umap, PseudoShift, Symmetrization};
use gdr::data::{load_csv, load_idx, make_blobs, DenseDataset};
use gdr::init::InitMode;
use gdr::kernels::LossKind;
use gdr::knn::{exact_knn, squared_euclidean};
use gdr::optimizer::{Apply, Sampling};
use gdr::pipeline::{reduce, AbMode, PipelineConfig, Preset, ReduceOptions};
use gdr::GdrError;
use proptest::prelude::*;

fn check_dataset(d: &DenseDataset) {
    assert_eq!(d.points().len(), d.n() * d.dim());
    assert!(d.points().iter().all(|v| v.is_finite()));
    if let Some(l) = d.labels() {
        assert_eq!(l.len(), d.n());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn csv_loader_never_panics(bytes in proptest::collection::vec(
        prop_oneof![Just(b','), Just(b'\n'), Just(b'.'), Just(b'-'), Just(b'e'), 0x30u8..0x3a, any::<u8>()],
        0..200,
    ), label in proptest::option::of(0usize..4), header: bool) {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&bytes).unwrap();
        if let Ok(d) = load_csv(f.path(), label, header) {
            check_dataset(&d);
        }
    }

    #[test]
    fn idx_loader_never_panics(
        mut head in proptest::collection::vec(any::<u8>(), 0..24),
        body in proptest::collection::vec(any::<u8>(), 0..64),
        magic in prop_oneof![Just([0u8, 0, 8, 3]), Just([0u8, 0, 8, 1]), any::<[u8; 4]>()],
    ) {
        if head.len() >= 4 {
            head[..4].copy_from_slice(&magic);
        }
        head.extend(body);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&head).unwrap();
        if let Ok(d) = load_idx(f.path(), None) {
            check_dataset(&d);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn exact_knn_matches_brute_force(n in 5usize..120, dim in 1usize..6, k in 1usize..5, seed: u64) {
        let d = make_blobs(n, 3, dim, 2.0, seed).unwrap();
        let k = k.min(n - 1);
        let g = exact_knn(&d, k).unwrap();
        for i in 0..n {
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_euclidean(d.row(i), d.row(j)), j as u32))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let kth = all[k - 1].0;
            for &j in g.neighbors(i) {
                prop_assert!(squared_euclidean(d.row(i), d.row(j as usize)) <= kth + 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn calibration_hits_targets(row in proptest::collection::vec(0.01f64..20.0, 8..40), frac in 0.1f64..0.8) {
        let k = row.len();
        let perplexity = 1.5 + frac * (k as f64 - 2.0);
        let fit = calibrate_perplexity(&row, perplexity).unwrap();
        prop_assert!(fit.degenerate || (fit.perplexity - perplexity).abs() <= 1e-5 * perplexity);
        let u = calibrate_umap(&row, true, PseudoShift::Squared).unwrap();
        let sum: f64 = u.p_row.iter().sum();
        prop_assert!(u.degenerate || (sum - (k as f64).log2()).abs() <= 1e-5);
        let nearest = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let at = row.iter().position(|&v| v == nearest).unwrap();
        prop_assert_eq!(u.p_row[at], 1.0);
    }
}

#[derive(Debug, Clone)]
struct Fuzzed {
    n: usize,
    preset: Preset,
    normalized: bool,
    loss: LossKind,
    init: InitMode,
    sym: Symmetrization,
    sym_attraction: bool,
    ab: AbMode,
    sampling: Sampling,
    apply: Apply,
    lr: f64,
    epochs: usize,
    neg_rate: usize,
    clip: Option<f64>,
    seed: u64,
}

fn fuzzed() -> impl Strategy<Value = Fuzzed> {
    (
        (12usize..60, prop_oneof![Just(Preset::Gdr), Just(Preset::Umap), Just(Preset::Tsne)], any::<bool>()),
        (
            prop_oneof![Just(LossKind::Kl), Just(LossKind::Frobenius)],
            prop_oneof![Just(InitMode::Random), Just(InitMode::Spectral)],
            prop_oneof![Just(Symmetrization::Average), Just(Symmetrization::Probabilistic)],
            any::<bool>(),
            prop_oneof![Just(AbMode::Unit), Just(AbMode::Fitted)],
        ),
        (
            prop_oneof![Just(Sampling::Explicit), Just(Sampling::ScalarSampling)],
            prop_oneof![Just(Apply::Collected), Just(Apply::InLoop)],
            prop_oneof![0.001f64..2.0, 1.0f64..1e4],
            1usize..25,
            1usize..8,
            proptest::option::of(0.1f64..10.0),
            any::<u64>(),
        ),
    )
        .prop_map(|((n, preset, normalized), (loss, init, sym, sym_attraction, ab), (sampling, apply, lr, epochs, neg_rate, clip, seed))| Fuzzed {
            n,
            preset,
            normalized,
            loss,
            init,
            sym,
            sym_attraction,
            ab,
            sampling,
            apply,
            lr,
            epochs,
            neg_rate,
            clip,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fuzzed_runs_finish_finite_or_report_divergence(f in fuzzed()) {
        let data = make_blobs(f.n, 3, 4, 3.0, f.seed).unwrap();
        let mut c = PipelineConfig::preset_with(f.preset, f.normalized);
        c.set_seed(f.seed);
        c.k = 5;
        c.affinity.perplexity = 3.0;
        c.run.loss = f.loss;
        c.init.mode = f.init;
        c.affinity.symmetrization = f.sym;
        c.run.sym_attraction = f.sym_attraction;
        c.ab = f.ab;
        c.run.sampling = f.sampling;
        c.run.apply = f.apply;
        c.run.lr = f.lr;
        c.run.epochs = f.epochs;
        c.run.neg_rate = f.neg_rate;
        if !c.run.normalized {
            c.run.clip = f.clip;
        }
        let opts = ReduceOptions { skip_metrics: true, ..ReduceOptions::default() };
        match reduce(&data, &c, &opts) {
            Ok(out) => prop_assert!(out.embedding.is_finite()),
            Err(GdrError::Diverged { .. }) | Err(GdrError::InvalidConfig(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}
