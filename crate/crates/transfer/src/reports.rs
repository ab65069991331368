//! CSV renderings of training history, drop decisions and sweep results.

use transfer_core::train::{DropRecord, DropSite, EpochRecord, Metrics};

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,test_acc,mean_class_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            opt(r.test_acc),
            opt(r.mean_class_acc)
        ));
    }
    out
}

pub fn drops_csv(drops: &[DropRecord]) -> String {
    let mut out = String::from("step,site,sample,dropped_index\n");
    for d in drops {
        let site = match d.site {
            DropSite::Local => "local".to_string(),
            DropSite::Block(b) => format!("block{b}"),
        };
        let index = d.dropped_index.map(|i| i.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{site},{},{index}\n", d.step, d.sample));
    }
    out
}

/// One finished grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `(key, value)` in grid order.
    pub point: Vec<(String, String)>,
    pub metrics: Metrics,
    pub final_train_loss: f64,
}

pub fn sweep_csv(keys: &[String], rows: &[SweepRow]) -> String {
    let mut out = keys.join(",");
    out.push_str(if keys.is_empty() { "" } else { "," });
    out.push_str("test_acc,mean_class_acc,final_train_loss\n");
    for row in rows {
        for (_, v) in &row.point {
            out.push_str(v);
            out.push(',');
        }
        out.push_str(&format!(
            "{},{},{}\n",
            row.metrics.overall_accuracy, row.metrics.mean_class_accuracy, row.final_train_loss
        ));
    }
    out
}

/// Human-readable summary printed by `eval`.
pub fn metrics_text(metrics: &Metrics, class_names: &[String]) -> String {
    let mut out = format!(
        "overall_accuracy {:.4}\nmean_class_accuracy {:.4}\n",
        metrics.overall_accuracy, metrics.mean_class_accuracy
    );
    for (name, acc) in class_names.iter().zip(&metrics.per_class_accuracy) {
        match acc {
            Some(a) => out.push_str(&format!("class {name} {a:.4}\n")),
            None => out.push_str(&format!("class {name} n/a\n")),
        }
    }
    out
}
