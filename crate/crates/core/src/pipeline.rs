//! Two-layer defended classifier: SAEC before inference, the reconstruction
//! detector after it.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, TargetClassifier};
use crate::contranet::Cgan;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::metric::SpDetector;
use crate::nn::Tensor;
use crate::saec::SaecDetector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum FinalDecision {
    RejectedLp,
    RejectedSp,
    Accepted(usize),
}

impl FinalDecision {
    pub fn is_rejected(&self) -> bool {
        !matches!(self, FinalDecision::Accepted(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub id: usize,
    pub lp_flagged: bool,
    pub lp_score: f64,
    pub predicted_label: Option<usize>,
    pub sp_flagged: Option<bool>,
    pub sp_distance: Option<f64>,
    #[serde(rename = "final")]
    pub decision: FinalDecision,
}

/// Per-sample failure inside a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictError {
    pub id: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layers {
    Both,
    LpOnly,
    SpOnly,
}

/// Borrowed, immutable view of the trained components.
#[derive(Clone, Copy)]
pub struct MixDefense<'a> {
    pub saec: &'a SaecDetector,
    pub clf: &'a TargetClassifier,
    pub sp: &'a SpDetector,
    pub cgan: &'a Cgan<f32>,
}

const CHUNK: usize = 128;

impl<'a> MixDefense<'a> {
    pub fn new(saec: &'a SaecDetector, clf: &'a TargetClassifier, sp: &'a SpDetector, cgan: &'a Cgan<f32>) -> Result<Self> {
        let shape = clf.input_shape();
        let ca = cgan.arch();
        let ma = sp.metric.arch();
        if [ca.channels, ca.height, ca.width] != shape || [ma.channels, ma.height, ma.width] != shape {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                got: vec![ca.channels, ca.height, ca.width, ma.channels, ma.height, ma.width],
            });
        }
        if ca.classes != clf.classes() {
            return Err(Error::Config("cGAN and classifier disagree on the class count".into()));
        }
        Ok(MixDefense { saec, clf, sp, cgan })
    }

    pub fn classify(&self, id: usize, x: &Image) -> Result<DetectorVerdict> {
        Ok(self.classify_chunk(id, std::slice::from_ref(x), Layers::Both)?.remove(0))
    }

    /// Verdicts for a chunk of images; `layers` disables one of the two
    /// detectors for ablations (a disabled detector never flags).
    fn classify_chunk(&self, first_id: usize, xs: &[Image], layers: Layers) -> Result<Vec<DetectorVerdict>> {
        let shape = self.clf.input_shape();
        for x in xs {
            if x.shape() != shape {
                return Err(Error::Shape { expected: shape.to_vec(), got: x.shape().to_vec() });
            }
        }
        let mut out: Vec<Option<DetectorVerdict>> = vec![None; xs.len()];
        let mut pass = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            let v = self.saec.detect(x)?;
            if v.flagged && layers != Layers::SpOnly {
                out[i] = Some(DetectorVerdict {
                    id: first_id + i,
                    lp_flagged: true,
                    lp_score: v.score,
                    predicted_label: None,
                    sp_flagged: None,
                    sp_distance: None,
                    decision: FinalDecision::RejectedLp,
                });
            } else {
                pass.push((i, v.score));
            }
        }
        if !pass.is_empty() {
            let batch = Tensor::stack(&pass.iter().map(|&(i, _)| xs[i].to_tensor().index0(0)).collect::<Vec<_>>());
            let logits = self.clf.logits_batch(&batch)?;
            let pred: Vec<usize> = logits.data().chunks(self.clf.classes()).map(argmax).collect();
            let sp = self.sp.detect_batch(self.cgan, &batch, &pred)?;
            for (k, &(i, score)) in pass.iter().enumerate() {
                let flagged = sp[k].flagged && layers != Layers::LpOnly;
                out[i] = Some(DetectorVerdict {
                    id: first_id + i,
                    lp_flagged: false,
                    lp_score: score,
                    predicted_label: Some(pred[k]),
                    sp_flagged: Some(flagged),
                    sp_distance: Some(sp[k].distance),
                    decision: if flagged { FinalDecision::RejectedSp } else { FinalDecision::Accepted(pred[k]) },
                });
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
    }

    /// Order-preserving parallel map of `classify`; ids are positions in
    /// `xs`. Failures are reported per sample.
    pub fn verdict_stream(&self, xs: &[Image]) -> Vec<std::result::Result<DetectorVerdict, VerdictError>> {
        self.verdict_stream_layers(xs, Layers::Both)
    }

    pub fn verdict_stream_layers(
        &self,
        xs: &[Image],
        layers: Layers,
    ) -> Vec<std::result::Result<DetectorVerdict, VerdictError>> {
        let starts: Vec<usize> = (0..xs.len()).step_by(CHUNK).collect();
        starts
            .par_iter()
            .flat_map_iter(|&s| {
                let part = &xs[s..(s + CHUNK).min(xs.len())];
                match self.classify_chunk(s, part, layers) {
                    Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
                    // fall back to one-by-one so only the failing samples carry errors
                    Err(_) => part
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            self.classify_chunk(s + i, std::slice::from_ref(x), layers).map(|mut v| v.remove(0)).map_err(
                                |e| VerdictError { id: s + i, kind: e.kind().into(), message: e.to_string() },
                            )
                        })
                        .collect(),
                }
            })
            .collect()
    }
}

pub const VERDICT_SCHEMA: &str = "# mixdefense-verdicts/1";
pub const VERDICT_CSV_HEADER: &str = "id,lp_flagged,lp_score,predicted_label,sp_flagged,sp_distance,final,final_label";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl DetectorVerdict {
    pub fn csv_row(&self) -> String {
        let (fin, label) = match self.decision {
            FinalDecision::RejectedLp => ("rejected_lp", None),
            FinalDecision::RejectedSp => ("rejected_sp", None),
            FinalDecision::Accepted(l) => ("accepted", Some(l)),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.id,
            self.lp_flagged,
            self.lp_score,
            opt(self.predicted_label),
            opt(self.sp_flagged),
            opt(self.sp_distance),
            fin,
            opt(label)
        )
    }
}

pub fn write_verdicts_csv(w: &mut impl Write, verdicts: &[DetectorVerdict]) -> std::io::Result<()> {
    writeln!(w, "{VERDICT_SCHEMA}")?;
    writeln!(w, "{VERDICT_CSV_HEADER}")?;
    for v in verdicts {
        writeln!(w, "{}", v.csv_row())?;
    }
    Ok(())
}

/// One JSON object per line; failed samples become `{"id", "error", ...}`.
pub fn write_verdicts_jsonl(
    w: &mut impl Write,
    verdicts: &[std::result::Result<DetectorVerdict, VerdictError>],
) -> std::io::Result<()> {
    for v in verdicts {
        let line = match v {
            Ok(v) => serde_json::to_string(v),
            Err(e) => serde_json::to_string(&serde_json::json!({ "id": e.id, "error": e.kind, "message": e.message })),
        }
        .map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
