//! Clean/robust evaluation and policy-distribution exports.

use std::fmt::Write as _;
use std::io::Write;

use aroid_nn::loss::argmax_rows;
use aroid_nn::Network;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig};
use crate::augspace::{AugmentationSpace, HeadKind};
use crate::checkpoint::PolicyCheckpointLog;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::policy::PolicyModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// Accuracy on the clean split and on PGD adversarial examples of it. The
/// model is only read.
pub fn evaluate<R: Rng + ?Sized>(
    model: &Network,
    data: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let mut clean = 0usize;
    let mut robust = 0usize;
    for (imgs, labels) in data.images.chunks(batch_size.max(1)).zip(data.labels.chunks(batch_size.max(1))) {
        let x = batch_tensor(imgs)?;
        clean += count_correct(&argmax_rows(&model.forward(&x)?), labels);
        let adv = pgd(model, &x, labels, attack, rng)?;
        robust += count_correct(&argmax_rows(&model.forward(&adv)?), labels);
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        clean_acc: clean as f64 / n,
        robust_acc: robust as f64 / n,
    })
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// One exported probability: ColorShape entries are summed per operation
/// type, other heads are reported per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub epoch: usize,
    pub image_id: usize,
    pub head: String,
    pub op_type: String,
    pub probability: f64,
}

/// Labels and catalog ranges of the exported categories of one head.
pub fn export_categories(space: &AugmentationSpace, head: usize) -> Vec<(String, std::ops::Range<usize>)> {
    let h = &space.heads()[head];
    if h.kind == HeadKind::ColorShape {
        h.op_groups()
            .into_iter()
            .map(|(op, r)| (op.name().to_string(), r))
            .collect()
    } else {
        h.entries.iter().enumerate().map(|(i, sp)| (sp.label(), i..i + 1)).collect()
    }
}

/// Rows ordered by epoch, image, head and catalog position.
pub fn export_policy_distributions(
    log: &PolicyCheckpointLog,
    space: &AugmentationSpace,
    images: &[Image],
    epochs: &[usize],
) -> Result<Vec<DistributionRow>> {
    if log.space_signature != space.signature() {
        return Err(Error::Config(format!(
            "policy log head sizes {:?} do not match the space {:?}",
            log.space_signature,
            space.signature()
        )));
    }
    if images.is_empty() {
        return Err(Error::Input("no images to visualise".into()));
    }
    let mut model = PolicyModel::with_backbone(
        Network::build(&log.policy_arch, &mut ChaCha8Rng::seed_from_u64(0)),
        log.policy_arch.feature_len(),
        &log.space_signature,
    );
    let mut rows = Vec::new();
    let refs: Vec<&Image> = images.iter().collect();
    for &epoch in epochs {
        model.load_flat(log.snapshot(epoch)?)?;
        let outs = model.forward(&refs)?;
        for (image_id, out) in outs.iter().enumerate() {
            for (h, head) in space.heads().iter().enumerate() {
                for (label, range) in export_categories(space, h) {
                    rows.push(DistributionRow {
                        epoch,
                        image_id,
                        head: head.kind.name().to_string(),
                        op_type: label,
                        probability: out.probs[h][range].iter().sum(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_distribution_csv<W: Write>(rows: &[DistributionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Input(format!("csv: {e}")))
}

const PALETTE: [&str; 14] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    "#1f77b4", "#8c564b", "#17becf", "#7f7f7f",
];

/// Stacked bars, one panel per head, one bar per image, for a single epoch.
/// Identity is left blank so the gap to the top reads as "no transformation".
pub fn distribution_svg(rows: &[DistributionRow], epoch: usize) -> String {
    let rows: Vec<&DistributionRow> = rows.iter().filter(|r| r.epoch == epoch).collect();
    let mut heads: Vec<&str> = Vec::new();
    for r in &rows {
        if !heads.contains(&r.head.as_str()) {
            heads.push(&r.head);
        }
    }
    let images = rows.iter().map(|r| r.image_id + 1).max().unwrap_or(0);
    let (pw, ph, bar) = (40.0 + 24.0 * images as f64, 180.0, 16.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">"#,
        pw * heads.len() as f64 + 20.0,
        ph + 60.0
    );
    for (k, head) in heads.iter().enumerate() {
        let x0 = 20.0 + k as f64 * pw;
        let _ = writeln!(svg, r#"<text x="{}" y="14">{head} (epoch {epoch})</text>"#, x0);
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="20" width="{}" height="{ph}" fill="none" stroke="black"/>"#,
            pw - 20.0
        );
        let mut labels: Vec<&str> = Vec::new();
        for img in 0..images {
            let mut top = 20.0 + ph;
            for r in rows.iter().filter(|r| r.head == *head && r.image_id == img) {
                if !labels.contains(&r.op_type.as_str()) {
                    labels.push(&r.op_type);
                }
                if r.op_type == "Identity" {
                    continue;
                }
                let idx = labels.iter().position(|l| *l == r.op_type).unwrap_or(0);
                let hgt = r.probability * ph;
                top -= hgt;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.1}" y="{top:.2}" width="{bar}" height="{hgt:.2}" fill="{}"><title>{} {:.4}</title></rect>"#,
                    x0 + 8.0 + 24.0 * img as f64,
                    PALETTE[idx % PALETTE.len()],
                    r.op_type,
                    r.probability
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
