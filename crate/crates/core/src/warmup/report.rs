use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::pipeline::{Method, StageReport};
use crate::backbones::BackboneKind;
use crate::data::Stage;
use crate::error::{CsdmError, Result};

pub const CSV_HEADER: &str = "run_id,method,backbone,stage,auc,relaimpr,logloss,seconds";

pub fn results_csv(run_id: &str, backbone: BackboneKind, reports: &[StageReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{run_id},{},{},{},{:.6},{:.4},{:.6},{:.3}",
            r.method.name(),
            backbone.name(),
            r.stage.name(),
            r.auc,
            r.rela_impr,
            r.logloss,
            r.seconds
        )
        .expect("write to string");
    }
    out
}

#[derive(Serialize)]
struct PlotData<'a> {
    run_id: &'a str,
    backbone: &'a str,
    stages: Vec<&'static str>,
    auc: Vec<Series>,
}

#[derive(Serialize)]
struct Series {
    method: &'static str,
    values: Vec<f64>,
}

/// Stage -> AUC series per method, for charting elsewhere.
pub fn plot_json(run_id: &str, backbone: BackboneKind, reports: &[StageReport]) -> String {
    let series = |m: Method| Series {
        method: m.name(),
        values: Stage::ALL
            .iter()
            .filter_map(|s| {
                reports
                    .iter()
                    .find(|r| r.method == m && r.stage == *s)
                    .map(|r| r.auc)
            })
            .collect(),
    };
    let data = PlotData {
        run_id,
        backbone: backbone.name(),
        stages: Stage::ALL.iter().map(|s| s.name()).collect(),
        auc: vec![series(Method::Baseline), series(Method::Csdm)],
    };
    let mut s = serde_json::to_string_pretty(&data).expect("plot data serializes");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CsdmError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CsdmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reports() -> Vec<StageReport> {
        Stage::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &stage)| {
                [Method::Baseline, Method::Csdm].map(|method| StageReport {
                    method,
                    stage,
                    auc: 0.7 + 0.01 * i as f64,
                    rela_impr: 0.0,
                    logloss: 0.6,
                    seconds: 1.5,
                })
            })
            .collect()
    }

    #[test]
    fn csv_has_one_row_per_stage_and_method() {
        let csv = results_csv("abc-seed1", BackboneKind::DeepFm, &reports());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 9);
        assert_eq!(
            lines[1],
            "abc-seed1,baseline,deepfm,cold,0.700000,0.0000,0.600000,1.500"
        );
    }

    #[test]
    fn plot_series_follow_stage_order() {
        let v: serde_json::Value =
            serde_json::from_str(&plot_json("r", BackboneKind::Dcn, &reports())).unwrap();
        assert_eq!(v["stages"][3], "warm_c");
        assert_eq!(v["auc"][1]["method"], "csdm");
        assert_eq!(v["auc"][1]["values"].as_array().unwrap().len(), 4);
    }
}
