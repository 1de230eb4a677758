// temporary probe: PLV contrast + single-fold convergence
use eegat::connectivity::{build_graph, PlvBand};
use eegat::dataset::*;
use eegat::features::{node_features, WindowFn};
use eegat::models::*;
use eegat::preprocess::{preprocess_recording, PreprocessOptions};
use eegat::train::*;
use std::time::Instant;

fn main() {
    let coupled = coupled_channel_indices();
    let opts = PreprocessOptions::default();
    let cfg = SynthConfig { duration_s: 28.0, ..SynthConfig::default() };
    let (recs, manifest) = generate_synthetic_dataset_with(12, 0.8, 5, &cfg).unwrap();

    let mut subjects = Vec::new();
    let mut cpl = Vec::new();
    let mut unc = Vec::new();
    for (rec, entry) in recs.iter().zip(&manifest.entries) {
        let windows = preprocess_recording(rec, entry.label, &opts).unwrap();
        let graphs: Vec<_> = windows.iter().map(|w| {
            let f = node_features(w, WindowFn::Hann).unwrap();
            build_graph(w, &f, PlvBand::Broadband).unwrap()
        }).collect();
        for g in &graphs {
            for i in 0..14 { for j in (i+1)..14 {
                let c = coupled.contains(&i) && coupled.contains(&j);
                let v = g.plv[i][j];
                if entry.label == ClassLabel::Epilepsy && c { cpl.push(v); }
                if !(coupled.contains(&i) && coupled.contains(&j)) || entry.label == ClassLabel::Control { unc.push(v); }
            } }
        }
        subjects.push(SubjectGraphs { subject_id: entry.subject_id.clone(), label: entry.label, windows: graphs });
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("windows/subject: {}", subjects[0].windows.len());
    println!("epileptic coupled-pair PLV mean {:.3}; other-pair PLV mean {:.3}", mean(&cpl), mean(&unc));

    // single full-size fold with convergence trace
    let opts = LoocvOptions {
        classifiers: vec![ClassifierKind::Gat],
        train: TrainConfig { iterations: 150, seed: 1, ..TrainConfig::default() },
        ..LoocvOptions::default()
    };
    let t = Instant::now();
    let fold = train_fold(&subjects, 0, &opts).unwrap();
    let (model, history) = fold.gat.as_ref().unwrap();
    println!("fold 0: {} epochs in {:.1} s (stopped_early={} best_epoch={} best_val={:.4})",
        history.val_loss.len(), t.elapsed().as_secs_f64(), history.stopped_early, history.best_epoch, history.best_val_loss);
    for (e, (tl, vl)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
        if e % 10 == 0 || e + 1 == history.train_loss.len() {
            println!("  epoch {e:>3}: train {tl:.4} val {vl:.4}");
        }
    }
    let _ = model;
    // held-out scoring
    let probs = window_probabilities(&fold, ClassifierKind::Gat, &subjects[0].windows, 64).unwrap();
    println!("held-out subject 0 ({}) window probs: {:?}", subjects[0].label,
        probs.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>());
}
