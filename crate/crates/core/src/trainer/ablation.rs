use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig, TrainConfig};
use super::hr_align::train_hr_align;
use crate::adapter::{Position, PositionSet};
use crate::dataset::PairedDemo;
use crate::encoder::Backbone;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub positions: PositionSet,
    pub use_language: bool,
}

/// E, M, L, EML, and L with uniform pooling.
pub fn ablation_variants() -> Vec<AblationVariant> {
    let v = |name: &str, positions: PositionSet, use_language| AblationVariant {
        name: name.into(),
        positions,
        use_language,
    };
    vec![
        v("E", PositionSet::only(Position::E), true),
        v("M", PositionSet::only(Position::M), true),
        v("L", PositionSet::only(Position::L), true),
        v("EML", PositionSet::all(), true),
        v("L-nolang", PositionSet::only(Position::L), false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub adapter_params: usize,
    pub learnable_params: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub backbone_unchanged: bool,
    pub eval: EvalReport,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,positions,use_language,adapter_params,learnable_params,first_loss,last_loss,backbone_unchanged,r2h_r1,r2h_r5,h2r_r1,h2r_r5,mrr,frozen_r2h_r1,probe_acc,frozen_probe_acc,bc_mse,frozen_bc_mse,success";

    pub fn csv_line(&self) -> String {
        let a = self.eval.retrieval_for("adapted");
        let f = self.eval.retrieval_for("frozen");
        let da = self.eval.downstream_for("adapted");
        let df = self.eval.downstream_for("frozen");
        let n = f64::NAN;
        format!(
            "{},{},{},{},{},{:.6},{:.6},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.4}",
            self.variant.name,
            self.variant.positions,
            self.variant.use_language,
            self.adapter_params,
            self.learnable_params,
            self.first_loss,
            self.last_loss,
            self.backbone_unchanged,
            a.map_or(n, |r| r.r2h_recall_at_1),
            a.map_or(n, |r| r.r2h_recall_at_5),
            a.map_or(n, |r| r.h2r_recall_at_1),
            a.map_or(n, |r| r.h2r_recall_at_5),
            a.map_or(n, |r| r.mrr),
            f.map_or(n, |r| r.r2h_recall_at_1),
            da.map_or(n, |d| d.probe_accuracy),
            df.map_or(n, |d| d.probe_accuracy),
            da.map_or(n, |d| d.bc_mse),
            df.map_or(n, |d| d.bc_mse),
            da.map_or(n, |d| d.success_rate),
        )
    }
}

fn snapshot(backbone: &Backbone) -> Vec<Vec<f64>> {
    backbone.parameters().iter().map(Tensor::to_vec).collect()
}

/// The config a single grid cell trains with.
pub fn variant_config(base: &TrainConfig, v: &AblationVariant) -> TrainConfig {
    TrainConfig {
        method: Method::HrAlign,
        adapter_positions: v.positions.clone(),
        use_language: v.use_language,
        out_dir: base.out_dir.join(format!("ablation_{}", v.name)),
        ..base.clone()
    }
}

/// Trains and evaluates every variant in turn. `on_row` sees each row as it
/// completes.
pub fn run_ablation_grid(
    base: &RunConfig,
    train: &[PairedDemo],
    heldout: &[PairedDemo],
    backbone: &Backbone,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let before = snapshot(backbone);
    let mut rows = Vec::new();
    for v in ablation_variants() {
        let cfg = variant_config(&base.train, &v);
        let outcome = train_hr_align(&cfg, train, backbone)?;
        let model = outcome.checkpoint.model()?;
        let eval = evaluate(&model, heldout, &base.eval, cfg.seed)?;
        let k = 10;
        let row = AblationRow {
            adapter_params: model.stack.parameter_count(),
            learnable_params: outcome.learnable,
            first_loss: outcome.log.head_mean(k, |r| r.loss),
            last_loss: outcome.log.tail_mean(k, |r| r.loss),
            backbone_unchanged: snapshot(backbone) == before && snapshot(&model.backbone) == before,
            variant: v,
            eval,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
