//! IDX files -> noise -> training -> checkpoint -> evaluation.

use orat_core::data::{idx, load_idx};
use orat_core::eval::{evaluate, standard_attacks, RowLabel};
use orat_core::rng::seeded;
use orat_core::trainer::train;
use orat_core::{Mlp, NoiseSpec, OratConfig};
use rand::Rng;

#[test]
fn idx_to_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded(3);
    let (n, side) = (120, 4);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    // Class c lights up row c, so the task is learnable.
    let pixels: Vec<u8> = labels
        .iter()
        .flat_map(|&c| {
            let mut img = vec![0u8; side * side];
            for j in 0..side {
                img[c as usize * side + j] = 200 + rng.gen_range(0..55);
            }
            img
        })
        .collect();
    let images = dir.path().join("images");
    let label_file = dir.path().join("labels");
    std::fs::write(&images, idx::encode_images(n, side, side, &pixels)).unwrap();
    std::fs::write(&label_file, idx::encode_labels(&labels)).unwrap();

    let clean = load_idx(&images, &label_file).unwrap();
    assert_eq!(
        (clean.len(), clean.dim(), clean.num_classes()),
        (n, side * side, 3)
    );
    let noisy = NoiseSpec::Symmetric { gamma: 0.1 }
        .apply(&clean, &mut seeded(4))
        .unwrap();
    assert!(noisy.corruption_rate() > 0.0);

    let cfg = OratConfig::parse(
        "k = 120\nm = 12\nepsilon = 0.05\nepochs = 40\nbatch_size = 20\nhidden = 8\nlambda_hat_init = 3\n",
    )
    .unwrap();
    let out = train(&cfg, &noisy).unwrap();
    assert_eq!(out.history.epochs.len(), 40);

    let ckpt = dir.path().join("model.ckpt");
    out.model.save(&ckpt).unwrap();
    let reloaded = Mlp::load(&ckpt).unwrap();
    assert_eq!(reloaded, out.model);

    let label = RowLabel {
        defense: "orat".into(),
        noise_kind: "symmetric".into(),
        gamma: 0.1,
    };
    let attacks = standard_attacks(0.05);
    let a = evaluate(&out.model, &clean, &label, &attacks, 9).unwrap();
    let b = evaluate(&reloaded, &clean, &label, &attacks, 9).unwrap();
    assert_eq!(a, b);
    assert!(
        a.rows[0].accuracy > 0.9,
        "natural accuracy {}",
        a.rows[0].accuracy
    );
}
