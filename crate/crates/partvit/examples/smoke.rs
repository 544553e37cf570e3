use partvit::config::TrainConfig;
use partvit::dataset::{load_split, write_synthetic};
use partvit::inference::{embeddings, loss_and_accuracy};
use partvit::trainer::{train, TrainOptions};
use partvit_core::eval::{assign_folds, cosine, verification_accuracy_kfold, ScoredPair};
use partvit_core::synth::SyntheticFaceSpec;
use partvit_core::Preset;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let dir = std::env::temp_dir().join("partvit-smoke-data");
    if !dir.join("manifest.json").exists() {
        write_synthetic(&SyntheticFaceSpec::default(), &dir, 10).unwrap();
    }
    let (m, tr) = load_split(&dir, "train").unwrap();
    let (_, va) = load_split(&dir, "val").unwrap();
    let cfg = TrainConfig::resolve(Preset::FvitTiny, None, &overrides).unwrap();
    let t = std::time::Instant::now();
    let out = train(&cfg, &tr, &va, m.identities, &TrainOptions::default()).unwrap();
    println!("train time {:?}", t.elapsed());
    let (_, acc) = loss_and_accuracy(&out.model, &cfg.loss, &tr, 64).unwrap();
    let (_, vacc) = loss_and_accuracy(&out.model, &cfg.loss, &va, 64).unwrap();
    let e = embeddings(&out.model, &va, 64).unwrap();
    let mut pairs = Vec::new();
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            pairs.push((cosine(&e[i].embedding, &e[j].embedding), e[i].label == e[j].label));
        }
    }
    let folds = assign_folds(pairs.len(), 10);
    let sp: Vec<ScoredPair> =
        pairs.iter().zip(folds).map(|(&(score, same), fold)| ScoredPair { score, same, fold }).collect();
    println!(
        "clean train acc {acc:.4} val acc {vacc:.4} verification {:.4}",
        verification_accuracy_kfold(&sp, 10).unwrap()
    );
}
