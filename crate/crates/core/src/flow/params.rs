//! Text serialization of flow parameters as a flat list of named arrays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowStack, Layer, OutputMap, PlanarLayer, RadialLayer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    /// Layer index, or `None` for the output map.
    pub layer: Option<usize>,
    pub kind: String,
    pub field: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub dim: usize,
    pub output: String,
    pub params: Vec<ParamEntry>,
}

fn entry(layer: Option<usize>, kind: &str, field: &str, values: Vec<f64>) -> ParamEntry {
    ParamEntry {
        layer,
        kind: kind.to_string(),
        field: field.to_string(),
        values,
    }
}

impl From<&FlowStack> for ParamFile {
    fn from(stack: &FlowStack) -> Self {
        let mut params = Vec::new();
        for (i, l) in stack.layers.iter().enumerate() {
            match l {
                Layer::Planar(p) => {
                    params.push(entry(Some(i), "planar", "u", p.u.clone()));
                    params.push(entry(Some(i), "planar", "w", p.w.clone()));
                    params.push(entry(Some(i), "planar", "b", vec![p.b]));
                }
                Layer::Radial(r) => {
                    params.push(entry(Some(i), "radial", "center", r.center.clone()));
                    params.push(entry(Some(i), "radial", "alpha", vec![r.alpha]));
                    params.push(entry(Some(i), "radial", "beta", vec![r.beta]));
                }
            }
        }
        let output = match stack.output {
            OutputMap::Identity => "identity",
            OutputMap::Simplex => "simplex",
            OutputMap::PositiveAffine { a, b } => {
                params.push(entry(None, "positive_affine", "a", vec![a]));
                params.push(entry(None, "positive_affine", "b", vec![b]));
                "positive_affine"
            }
        };
        ParamFile {
            dim: stack.dim,
            output: output.to_string(),
            params,
        }
    }
}

fn scalar(values: &[f64], what: &str) -> Result<f64> {
    match values {
        [v] => Ok(*v),
        _ => Err(Error::Parse(format!("{what} must hold exactly one value"))),
    }
}

impl TryFrom<&ParamFile> for FlowStack {
    type Error = Error;

    fn try_from(file: &ParamFile) -> Result<Self> {
        let find = |layer: Option<usize>, field: &str| -> Result<&ParamEntry> {
            file.params
                .iter()
                .find(|e| e.layer == layer && e.field == field)
                .ok_or_else(|| Error::Parse(format!("missing field {field} for layer {layer:?}")))
        };
        let n_layers = file
            .params
            .iter()
            .filter_map(|e| e.layer)
            .max()
            .map_or(0, |m| m + 1);
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let kind = file
                .params
                .iter()
                .find(|e| e.layer == Some(i))
                .map(|e| e.kind.as_str())
                .ok_or_else(|| Error::Parse(format!("no entries for layer {i}")))?;
            let layer = match kind {
                "planar" => Layer::Planar(PlanarLayer::new(
                    find(Some(i), "u")?.values.clone(),
                    find(Some(i), "w")?.values.clone(),
                    scalar(&find(Some(i), "b")?.values, "b")?,
                )?),
                "radial" => Layer::Radial(RadialLayer::new(
                    find(Some(i), "center")?.values.clone(),
                    scalar(&find(Some(i), "alpha")?.values, "alpha")?,
                    scalar(&find(Some(i), "beta")?.values, "beta")?,
                )?),
                other => return Err(Error::Parse(format!("unknown layer kind {other}"))),
            };
            layers.push(layer);
        }
        let output = match file.output.as_str() {
            "identity" => OutputMap::Identity,
            "simplex" => OutputMap::Simplex,
            "positive_affine" => OutputMap::PositiveAffine {
                a: scalar(&find(None, "a")?.values, "a")?,
                b: scalar(&find(None, "b")?.values, "b")?,
            },
            other => return Err(Error::Parse(format!("unknown output map {other}"))),
        };
        FlowStack::new(file.dim, layers, output)
    }
}

impl FlowStack {
    pub fn to_param_text(&self) -> String {
        serde_json::to_string_pretty(&ParamFile::from(self)).expect("parameter file serializes")
    }

    pub fn from_param_text(text: &str) -> Result<Self> {
        let file: ParamFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        FlowStack::try_from(&file)
    }
}

pub fn save_params(stack: &FlowStack, path: &Path) -> Result<()> {
    std::fs::write(path, stack.to_param_text())?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<FlowStack> {
    FlowStack::from_param_text(&std::fs::read_to_string(path)?)
}
