use std::str::FromStr;

use super::layers::{BatchNorm, Conv2d, Dense, Dropout, Layer};
use super::{NetworkError, Result, TapIndex, TapPoint};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchitectureId {
    /// Two conv/pool stages and three FC layers.
    MnistSmall,
    /// Nine conv/batchnorm stages with dropout before the classifier.
    Comparison,
}

impl ArchitectureId {
    pub fn name(self) -> &'static str {
        match self {
            ArchitectureId::MnistSmall => "mnist_small",
            ArchitectureId::Comparison => "comparison",
        }
    }
}

impl FromStr for ArchitectureId {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_small" => Ok(ArchitectureId::MnistSmall),
            "comparison" => Ok(ArchitectureId::Comparison),
            other => Err(NetworkError::UnknownArchitecture(other.to_string())),
        }
    }
}

/// Everything needed to rebuild a network's layer chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub id: ArchitectureId,
    /// Per-sample input as `[height, width, channels]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub conv_widths: Vec<usize>,
    /// Width of the FC layer feeding the hidden-feature layer.
    pub fc_width: usize,
    /// Width of the hidden-feature layer read by `hidden_preact`.
    pub hidden_width: usize,
    pub keep_prob: f64,
}

impl ArchitectureSpec {
    pub fn new(id: ArchitectureId, input: [usize; 3], classes: usize) -> Self {
        let (conv_widths, fc_width) = match id {
            ArchitectureId::MnistSmall => (vec![32, 64], 256),
            ArchitectureId::Comparison => (vec![128, 128, 128, 256, 256, 256, 512, 256, 128], 1024),
        };
        ArchitectureSpec {
            id,
            input,
            classes,
            conv_widths,
            fc_width,
            hidden_width: 100,
            keep_prob: Dropout::DEFAULT_KEEP,
        }
    }

    fn invalid(&self, why: impl Into<String>) -> NetworkError {
        NetworkError::Architecture(format!("{} on {:?}: {}", self.id.name(), self.input, why.into()))
    }

    pub(super) fn layers(&self, rng: &mut Rng) -> Result<(Vec<Layer>, TapIndex)> {
        let [h, w, c] = self.input;
        if self.classes < 2 {
            return Err(self.invalid("need at least 2 classes"));
        }
        if self.fc_width == 0 || self.hidden_width == 0 || self.conv_widths.contains(&0) {
            return Err(self.invalid("layer widths must be positive"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(self.invalid(format!("keep probability {} outside (0, 1]", self.keep_prob)));
        }
        let mut layers = Vec::new();
        let flat;
        match self.id {
            ArchitectureId::MnistSmall => {
                if self.conv_widths.len() != 2 {
                    return Err(self.invalid("expects 2 conv widths"));
                }
                if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
                    return Err(self.invalid("height and width must be positive multiples of 4"));
                }
                let mut ch = c;
                for &out in &self.conv_widths {
                    layers.push(Layer::Conv2d(Conv2d::new(ch, out, 3, 1, rng)));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2x2);
                    ch = out;
                }
                flat = (h / 4) * (w / 4) * ch;
            }
            ArchitectureId::Comparison => {
                if self.conv_widths.len() != 9 {
                    return Err(self.invalid("expects 9 conv widths"));
                }
                let ok = |d: usize| d.is_multiple_of(4) && d / 4 >= 8 && (d / 4 - 6).is_multiple_of(2);
                if !ok(h) || !ok(w) {
                    return Err(
                        self.invalid("height and width must be multiples of 4, at least 32, with (d/4 - 6) even")
                    );
                }
                let mut ch = c;
                for (i, &out) in self.conv_widths.iter().enumerate() {
                    let padding = if i < 6 { 1 } else { 0 };
                    layers.push(Layer::Conv2d(Conv2d::new(ch, out, 3, padding, rng)));
                    layers.push(Layer::BatchNorm(BatchNorm::new(out)));
                    layers.push(Layer::Relu);
                    if matches!(i, 2 | 5 | 8) {
                        layers.push(Layer::MaxPool2x2);
                    }
                    ch = out;
                }
                flat = ((h / 4 - 6) / 2) * ((w / 4 - 6) / 2) * ch;
            }
        }
        let dropout = self.id == ArchitectureId::Comparison;
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense(Dense::new(flat, self.fc_width, rng)));
        layers.push(Layer::Relu);
        if dropout {
            layers.push(Layer::Dropout(Dropout { keep: self.keep_prob }));
        }
        layers.push(Layer::Dense(Dense::new(self.fc_width, self.hidden_width, rng)));
        let hidden = layers.len() - 1;
        layers.push(Layer::Relu);
        if dropout {
            layers.push(Layer::Dropout(Dropout { keep: self.keep_prob }));
        }
        layers.push(Layer::Dense(Dense::new(self.hidden_width, self.classes, rng)));
        let logits = layers.len() - 1;
        Ok((
            layers,
            vec![(TapPoint::Logits, logits), (TapPoint::HiddenPreact, hidden)],
        ))
    }
}
