#[test]
fn twin_grad_symmetry_probe() {
    use drmm_core::data::{generate, GenConfig};
    use drmm_core::losses::StopGradConfig;
    use drmm_core::model::{loss_and_grad, ModelConfig, Weights, DEFAULT_O_ANCHOR};
    let cfg = ModelConfig { seed: 3, ..ModelConfig::default() };
    let w = Weights::init(&cfg);
    let scenes = generate(1, 500, &GenConfig::default()).unwrap();
    let pairs = [(0usize,1usize),(3,4),(6,7),(9,10),(12,13),(15,16),(18,19)];
    let hd = cfg.head_out_dim();
    let mut bad = 0;
    for scene in &scenes {
        let (_, tape) = loss_and_grad(scene, &w, &cfg, 0.0, DEFAULT_O_ANCHOR, &StopGradConfig::default()).unwrap();
        for &(a,b) in &pairs {
            let same = tape.init_proposals[a] == tape.init_proposals[b]
                && (0..hd).all(|j| tape.head_bias[0][a*hd+j] == tape.head_bias[0][b*hd+j])
                && (0..hd).all(|j| tape.head_bias[1][a*hd+j] == tape.head_bias[1][b*hd+j]);
            if !same { bad += 1; }
        }
    }
    std::println!("asymmetric scene-pair count: {bad} / {}", scenes.len()*pairs.len());
    assert_eq!(bad, 0);
}
