use std::path::{Path, PathBuf};

use crate::cells::NormMode;
use crate::error::{Error, Result};
use crate::harness::train::{run_training_to, TrainOutcome};
use crate::harness::TrainConfig;

/// File name of the loss curve for window `k`.
pub fn ksweep_file(k: usize) -> String {
    format!("metrics-k{k}.csv")
}

/// One ATN run per window length, all sharing `base`'s seed. Each run's
/// curve goes to `out_dir/metrics-k{k}.csv` when `out_dir` is set.
pub fn run_ksweep(base: &TrainConfig, k_list: &[usize], out_dir: Option<&Path>) -> Result<Vec<(usize, TrainOutcome)>> {
    if k_list.is_empty() {
        return Err(Error::config("k_list", "needs at least one window length"));
    }
    if base.mode != NormMode::Atn {
        return Err(Error::config(
            "mode",
            "ksweep runs assorted-time normalization; set mode = \"atn\"",
        ));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(k) = k_list.iter().find(|k| !seen.insert(**k)) {
        return Err(Error::config("k_list", format!("window {k} listed twice")));
    }
    let mut out = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut cfg = base.clone();
        cfg.k = k;
        cfg.output_dir = None;
        let path: Option<PathBuf> = out_dir.map(|d| d.join(ksweep_file(k)));
        out.push((k, run_training_to(&cfg, path.as_deref())?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::run_training;
    use crate::tasks::TaskKind;

    #[test]
    fn k_one_reproduces_layer_norm_run() {
        let mut base = TrainConfig::small(TaskKind::Copy, 6, NormMode::Atn);
        base.iterations = 4;
        base.eval_every = 2;
        let sweep = run_ksweep(&base, &[1], None).unwrap();
        let mut ln = base.clone();
        ln.mode = NormMode::Ln;
        let ln = run_training(&ln).unwrap();
        let (_, atn) = &sweep[0];
        for (a, b) in atn.rows.iter().zip(&ln.rows) {
            assert!((a.train_loss - b.train_loss).abs() <= 1e-12);
            assert!((a.val_loss - b.val_loss).abs() <= 1e-12);
        }
    }

    #[test]
    fn writes_one_file_per_k() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = TrainConfig::small(TaskKind::Add, 5, NormMode::Atn);
        base.iterations = 2;
        run_ksweep(&base, &[2, 3, 4], Some(dir.path())).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["metrics-k2.csv", "metrics-k3.csv", "metrics-k4.csv"]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let base = TrainConfig::small(TaskKind::Add, 5, NormMode::Atn);
        assert!(run_ksweep(&base, &[], None).is_err());
        assert!(run_ksweep(&base, &[2, 2], None).is_err());
        let ln = TrainConfig::small(TaskKind::Add, 5, NormMode::Ln);
        assert!(run_ksweep(&ln, &[2], None).is_err());
    }
}
