//! Result emission: one `rounds.csv` per experiment with a stable column
//! schema, and a `summary.json` embedding the headline metrics, the fully
//! resolved configuration, and a content hash of the experiment file.

use std::io::Write;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::simulator::{RoundRecord, SimConfig, SimOutput};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Column order of `rounds.csv`; every [`RoundRecord`] field appears once.
pub const CSV_HEADER: &str = "round,testing_error,sign_match,total_norm,flipping_rate,\
participating_fakes,accepted_fakes,accepted_total,trust_genuine,trust_fake";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17}")).unwrap_or_default()
}

pub fn rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 96 + CSV_HEADER.len() + 1);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.17},{:.17},{:.17},{},{},{},{},{},{}\n",
            r.round,
            r.testing_error,
            r.sign_match,
            r.total_norm,
            opt(r.flipping_rate),
            r.participating_fakes,
            r.accepted_fakes,
            r.accepted_total,
            opt(r.trust_genuine),
            opt(r.trust_fake),
        ));
    }
    out
}

fn resolved_config_json(cfg: &SimConfig) -> serde_json::Value {
    let p = cfg.attack_params;
    json!({
        "n_genuine": cfg.n_genuine,
        "fake_fraction": cfg.fake_fraction,
        "n_fakes": cfg.n_fakes(),
        "participation_rate": cfg.participation_rate,
        "rounds": cfg.rounds,
        "seed": cfg.seed,
        "hidden_layers": cfg.hidden_layers,
        "learning_rate": cfg.train.learning_rate,
        "local_epochs": cfg.train.local_epochs,
        "batch_size": cfg.train.batch_size,
        "n_classes": cfg.data.n_classes,
        "feature_dim": cfg.data.feature_dim,
        "examples_per_client": cfg.data.examples_per_client,
        "spread": cfg.data.spread,
        "test_per_class": cfg.data.test_per_class,
        "q": cfg.q,
        "attack": cfg.attack.key(),
        "rule": cfg.rule.key(),
        "c0": p.c0,
        "e": p.e,
        "beta": p.beta,
        "c_floor": p.c_floor,
        "p": p.p,
        "alpha": p.alpha,
        "eps": p.eps,
        "gamma": p.gamma,
        "lambda": p.lambda,
        "ablate_same_magnitude": p.ablate_same_magnitude,
        "ablate_fixed_scale": p.ablate_fixed_scale,
        "root_size": cfg.root_size,
        "flcert_groups": cfg.flcert_groups,
        "fldetector_rounds": cfg.fldetector_rounds,
        "fldetector_window": cfg.fldetector_window,
        "defense": cfg.defense.map(|d| d.key()),
        "defense_n": cfg.defense_n,
        "defense_b": cfg.defense_b,
    })
}

/// Hex SHA-256 of the experiment file's raw text.
pub fn content_hash(config_text: &str) -> String {
    let digest = Sha256::digest(config_text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn summary_json(
    cfg: &SimConfig,
    out: &SimOutput,
    config_hash: &str,
    runtime_secs: f64,
) -> serde_json::Value {
    let last = out.records.last();
    json!({
        "final_error": out.final_error,
        "final_sign_match": last.map(|r| r.sign_match),
        "final_total_norm": out.w_final.sub(&out.w_init)
            .map(|d| d.l2_norm()).unwrap_or(f64::NAN),
        "detection": out.detection.as_ref().map(|d| json!({
            "detected_ids": d.detected.iter().collect::<Vec<_>>(),
            "clusters_separable": d.clusters_separable,
            "accuracy": d.accuracy,
        })),
        "runtime_secs": runtime_secs,
        "config": resolved_config_json(cfg),
        "config_sha256": config_hash,
    })
}

pub fn write_file(path: &Path, content: &str) -> Result<(), ReportError> {
    let mut f = std::fs::File::create(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(content.as_bytes()).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{self, AttackKind};

    #[test]
    fn csv_schema_is_stable() {
        let fields = CSV_HEADER.split(',').count();
        assert_eq!(fields, 10);
        let rec = RoundRecord {
            round: 3,
            testing_error: 0.5,
            sign_match: 0.25,
            total_norm: 1.5,
            flipping_rate: None,
            participating_fakes: 2,
            accepted_fakes: 1,
            accepted_total: 8,
            trust_genuine: Some(0.125),
            trust_fake: None,
        };
        let csv = rounds_csv(&[rec]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), fields);
        assert!(row.starts_with("3,0.5"));
        // Absent optionals serialize as empty cells.
        assert!(row.ends_with(','));
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let a = content_hash("rounds = 5\n");
        assert_eq!(a, content_hash("rounds = 5\n"));
        assert_ne!(a, content_hash("rounds = 6\n"));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn summary_embeds_config_and_metrics() {
        let mut cfg = simulator::desk_config();
        cfg.n_genuine = 6;
        cfg.rounds = 3;
        cfg.participation_rate = 0.5;
        cfg.data.n_classes = 2;
        cfg.data.feature_dim = 4;
        cfg.data.examples_per_client = 8;
        cfg.data.test_per_class = 10;
        cfg.q = 0.5;
        cfg.hidden_layers = vec![6];
        cfg.attack = AttackKind::None;
        let out = simulator::run(&cfg).unwrap();
        let summary = summary_json(&cfg, &out, &content_hash("x"), 1.25);
        assert_eq!(summary["config"]["n_classes"], 2);
        assert_eq!(summary["config"]["attack"], "none");
        assert_eq!(summary["runtime_secs"], 1.25);
        assert!(summary["final_error"].as_f64().unwrap() <= 1.0);
    }
}
