use ifa_core::archive::{DatasetSplit, HeadKind, Selector};
use ifa_core::campipe::{generate, CamOptions, ScaleMode};
use ifa_core::eval::replay_logits;
use ifa_core::refnet::{self, GradClasses, Lcg, RefNetModel, CONV2_CHANNELS, FEATURE_SPATIAL};
use ifa_core::schemes::{ClassSelection, Scheme};

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Trained enough that most ReLUs are away from their kinks.
fn model(head: HeadKind) -> (RefNetModel, refnet::ShapesDataset) {
    let ds = refnet::gen_dataset(11, 64).unwrap();
    let cfg = refnet::TrainConfig {
        epochs: 1,
        ..refnet::TrainConfig::for_head(head)
    };
    let (m, _) = refnet::train(&ds, head, &cfg).unwrap();
    (m, ds)
}

#[test]
fn parameter_gradients_match_central_differences() {
    for head in [HeadKind::GapLinear, HeadKind::FlattenLinear] {
        let (m, ds) = model(head);
        let images: Vec<&[f32]> = ds.images[..2].iter().map(|v| v.as_slice()).collect();
        let labels: Vec<usize> = ds.labels[..2].iter().map(|&l| l as usize).collect();
        let (_, grads) = m.batch_grads(&images, &labels);
        let h = 1e-5;
        let mut rng = Lcg::new(5);
        for t in 0..6 {
            let len = grads.tensors()[t].len();
            for _ in 0..6 {
                let i = rng.below(len);
                let mut plus = m.clone();
                plus.params.tensors_mut()[t][i] += h;
                let mut minus = m.clone();
                minus.params.tensors_mut()[t][i] -= h;
                let numeric = (plus.batch_loss(&images, &labels) - minus.batch_loss(&images, &labels)) / (2.0 * h);
                let analytic = grads.tensors()[t][i];
                assert!(
                    rel_err(analytic, numeric) <= 1e-3 || (analytic - numeric).abs() < 1e-9,
                    "{head:?} tensor {t} index {i}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn target_gradients_match_central_differences() {
    for head in [HeadKind::GapLinear, HeadKind::FlattenLinear] {
        let (m, ds) = model(head);
        let a = m.forward(&ds.images[0]).unwrap().features;
        for c in 0..2 {
            let g = m.grad_target(c).unwrap();
            for i in (0..a.len()).step_by(37) {
                let h = 1e-3;
                let mut ap = a.clone();
                ap[i] += h;
                let mut am = a.clone();
                am[i] -= h;
                let numeric = (m.head_logits(&ap)[c] - m.head_logits(&am)[c]) / (2.0 * h);
                assert!(rel_err(g[i], numeric) <= 1e-6, "{head:?} class {c} entry {i}");
            }
        }
    }
}

#[test]
fn raw_cam_sums_decompose_gap_logits() {
    let (m, ds) = model(HeadKind::GapLinear);
    let dir = tempfile::tempdir().unwrap();
    let reader = refnet::dump_archive(&m, &ds, &dir.path().join("arc"), GradClasses::All, DatasetSplit::Train).unwrap();
    for scheme in [Scheme::GradCam, Scheme::XGradCam, Scheme::PixelwiseGrad] {
        for c in 0..2 {
            let opts = CamOptions::new(scheme, ClassSelection::Class(c), ScaleMode::Raw);
            let cams = generate(&reader, &Selector::all(), &opts).unwrap();
            assert_eq!(cams.len(), ds.len());
            for cam in &cams {
                let rec = reader.read_sample(cam.sample_id).unwrap();
                let target = rec.logits[c as usize] as f64 - m.params.head_b[c as usize];
                assert!(
                    rel_err(cam.sum, target) <= 1e-4,
                    "{scheme} class {c} sample {}: {} vs {target}",
                    cam.sample_id,
                    cam.sum
                );
            }
        }
    }
}

#[test]
fn stored_logits_replay_from_the_manifest_head() {
    for head in [HeadKind::GapLinear, HeadKind::FlattenLinear] {
        let (m, ds) = model(head);
        let dir = tempfile::tempdir().unwrap();
        let reader = refnet::dump_archive(
            &m,
            &ds,
            &dir.path().join("arc"),
            GradClasses::TrueClass,
            DatasetSplit::Test,
        )
        .unwrap();
        let spec = reader.manifest().head.clone().unwrap();
        for id in [0u64, 17, 63] {
            let rec = reader.read_sample(id).unwrap();
            assert_eq!(rec.grads.keys().copied().collect::<Vec<_>>(), vec![rec.true_class]);
            let replayed = replay_logits(&spec, &rec.features, CONV2_CHANNELS, FEATURE_SPATIAL, None).unwrap();
            for (r, &s) in replayed.iter().zip(&rec.logits) {
                assert!((r - s as f64).abs() <= 1e-5 * r.abs().max(1.0), "{head:?} sample {id}");
            }
        }
    }
}

#[test]
fn dumps_are_reproducible() {
    let (m, ds) = model(HeadKind::GapLinear);
    let dir = tempfile::tempdir().unwrap();
    let a = refnet::dump_archive(&m, &ds, &dir.path().join("a"), GradClasses::All, DatasetSplit::Train).unwrap();
    let b = refnet::dump_archive(&m, &ds, &dir.path().join("b"), GradClasses::All, DatasetSplit::Train).unwrap();
    for id in a.sample_ids() {
        let name = format!("samples/{id:08}.rec");
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
}
