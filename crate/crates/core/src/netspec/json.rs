//! JSON form of architecture trees.
//!
//! ```json
//! {"input_shape": [1],
//!  "net": {"op": "serial", "children": [
//!     {"op": "dense", "width": 2048, "w_std": 1.5, "b_std": 0.05},
//!     {"op": "erf"},
//!     {"op": "dense", "width": 1, "w_std": 1.5, "b_std": 0.05}]}}
//! ```

use serde::{Deserialize, Serialize};

use super::{InputShape, Layer, NetSpec, Padding, Phi};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    input_shape: Vec<usize>,
    net: LayerDoc,
}

fn one() -> f64 {
    1.0
}

fn unit_strides() -> [usize; 2] {
    [1, 1]
}

fn valid() -> Padding {
    Padding::Valid
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LayerDoc {
    Serial {
        children: Vec<LayerDoc>,
    },
    Parallel {
        children: Vec<LayerDoc>,
    },
    FanOut {
        n: usize,
    },
    FanInSum,
    Dense {
        width: usize,
        #[serde(default = "one")]
        w_std: f64,
        #[serde(default)]
        b_std: f64,
    },
    Conv {
        channels: usize,
        filter_shape: [usize; 2],
        #[serde(default = "unit_strides")]
        strides: [usize; 2],
        #[serde(default = "valid")]
        padding: Padding,
        #[serde(default = "one")]
        w_std: f64,
        #[serde(default)]
        b_std: f64,
    },
    Relu,
    LeakyRelu {
        alpha: f64,
    },
    Abs,
    AbRelu {
        a: f64,
        b: f64,
    },
    Erf,
    Identity,
    Flatten,
    AvgPool {
        window_shape: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        strides: Option<[usize; 2]>,
        #[serde(default = "valid")]
        padding: Padding,
    },
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
}

impl From<LayerDoc> for Layer {
    fn from(doc: LayerDoc) -> Layer {
        match doc {
            LayerDoc::Serial { children } => Layer::Serial(children.into_iter().map(Into::into).collect()),
            LayerDoc::Parallel { children } => Layer::Parallel(children.into_iter().map(Into::into).collect()),
            LayerDoc::FanOut { n } => Layer::FanOut { n },
            LayerDoc::FanInSum => Layer::FanInSum,
            LayerDoc::Dense { width, w_std, b_std } => Layer::Dense { width, w_std, b_std },
            LayerDoc::Conv { channels, filter_shape, strides, padding, w_std, b_std } => Layer::Conv {
                channels,
                filter_shape: (filter_shape[0], filter_shape[1]),
                strides: (strides[0], strides[1]),
                padding,
                w_std,
                b_std,
            },
            LayerDoc::Relu => Layer::relu(),
            LayerDoc::LeakyRelu { alpha } => Layer::leaky_relu(alpha),
            LayerDoc::Abs => Layer::abs(),
            LayerDoc::AbRelu { a, b } => Layer::ab_relu(a, b),
            LayerDoc::Erf => Layer::erf(),
            LayerDoc::Identity => Layer::Identity,
            LayerDoc::Flatten => Layer::Flatten,
            LayerDoc::AvgPool { window_shape, strides, padding } => {
                let strides = strides.unwrap_or(window_shape);
                Layer::AvgPool {
                    window: (window_shape[0], window_shape[1]),
                    strides: (strides[0], strides[1]),
                    padding,
                }
            }
            LayerDoc::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerDoc::Dropout { rate } => Layer::Dropout { rate },
        }
    }
}

impl From<&Layer> for LayerDoc {
    fn from(layer: &Layer) -> LayerDoc {
        match layer {
            Layer::Serial(c) => LayerDoc::Serial { children: c.iter().map(Into::into).collect() },
            Layer::Parallel(c) => LayerDoc::Parallel { children: c.iter().map(Into::into).collect() },
            Layer::FanOut { n } => LayerDoc::FanOut { n: *n },
            Layer::FanInSum => LayerDoc::FanInSum,
            &Layer::Dense { width, w_std, b_std } => LayerDoc::Dense { width, w_std, b_std },
            &Layer::Conv { channels, filter_shape, strides, padding, w_std, b_std } => LayerDoc::Conv {
                channels,
                filter_shape: [filter_shape.0, filter_shape.1],
                strides: [strides.0, strides.1],
                padding,
                w_std,
                b_std,
            },
            Layer::Nonlinearity(Phi::Erf) => LayerDoc::Erf,
            &Layer::Nonlinearity(Phi::AbRelu { a, b }) => {
                if a == 0.0 && b == 1.0 {
                    LayerDoc::Relu
                } else if a == -1.0 && b == 1.0 {
                    LayerDoc::Abs
                } else {
                    LayerDoc::AbRelu { a, b }
                }
            }
            Layer::Identity => LayerDoc::Identity,
            Layer::Flatten => LayerDoc::Flatten,
            &Layer::AvgPool { window, strides, padding } => {
                LayerDoc::AvgPool { window_shape: [window.0, window.1], strides: Some([strides.0, strides.1]), padding }
            }
            Layer::GlobalAvgPool => LayerDoc::GlobalAvgPool,
            &Layer::Dropout { rate } => LayerDoc::Dropout { rate },
        }
    }
}

pub(super) fn from_json(text: &str) -> Result<NetSpec> {
    let doc: SpecDoc = serde_json::from_str(text)?;
    let input_shape = match doc.input_shape.as_slice() {
        &[n] => InputShape::Vector(n),
        &[h, w, c] => InputShape::Image { h, w, c },
        other => {
            return Err(Error::InvalidArgument(format!("input_shape must be [features] or [H, W, C], got {other:?}")))
        }
    };
    Ok(NetSpec::new(input_shape, doc.net.into()))
}

pub(super) fn to_json(spec: &NetSpec) -> String {
    let input_shape = match spec.input_shape {
        InputShape::Vector(n) => vec![n],
        InputShape::Image { h, w, c } => vec![h, w, c],
    };
    let doc = SpecDoc { input_shape, net: (&spec.root).into() };
    serde_json::to_string_pretty(&doc).expect("architecture documents always serialize")
}
