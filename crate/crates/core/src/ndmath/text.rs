//! Plain-text parameter export.
//!
//! ```text
//! densenet 1
//! layer_sizes 2 3 1
//! activations relu identity
//! weights 0 3 2
//! <3 rows of 2 values>
//! biases 0 3
//! <3 values>
//! ...
//! end
//! ```
//!
//! Values are written with 17 significant digits so that import reproduces
//! every parameter bit for bit.

use ndarray::{Array1, Array2};

use super::net::{Activation, DenseNet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl DenseNet {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("densenet {FORMAT_VERSION}\n"));
        let sizes: Vec<String> = self.layer_sizes().iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("layer_sizes {}\n", sizes.join(" ")));
        let acts: Vec<&str> = self.activations().iter().map(|a| a.name()).collect();
        out.push_str(&format!("activations {}\n", acts.join(" ")));
        for l in 0..self.layer_count() {
            let w = self.weights(l);
            out.push_str(&format!("weights {l} {} {}\n", w.nrows(), w.ncols()));
            for row in w.rows() {
                let vals: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
                out.push_str(&vals.join(" "));
                out.push('\n');
            }
            let b = self.biases(l);
            out.push_str(&format!("biases {l} {}\n", b.len()));
            let vals: Vec<String> = b.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineReader::new(text);
        let header = lines.expect_keyword("densenet")?;
        let version: u32 = lines.parse_one(&header)?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "network format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let sizes_line = lines.expect_keyword("layer_sizes")?;
        let layer_sizes: Vec<usize> = lines.parse_all(&sizes_line)?;
        let acts_line = lines.expect_keyword("activations")?;
        let activations = acts_line
            .iter()
            .map(|name| {
                Activation::from_name(name).ok_or_else(|| lines.error(format!("unknown activation `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if layer_sizes.len() < 2 || activations.len() != layer_sizes.len() - 1 {
            return Err(lines.error("layer_sizes and activations disagree"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let head: Vec<usize> = {
                let h = lines.expect_keyword("weights")?;
                lines.parse_all(&h)?
            };
            if head != [l, pair[1], pair[0]] {
                return Err(lines.error(format!("weights header for layer {l} does not match layer sizes")));
            }
            let mut w = Array2::zeros((pair[1], pair[0]));
            for r in 0..pair[1] {
                let row: Vec<f64> = {
                    let t = lines.next_tokens()?;
                    lines.parse_all(&t)?
                };
                if row.len() != pair[0] {
                    return Err(lines.error(format!("weights row has {} values, expected {}", row.len(), pair[0])));
                }
                w.row_mut(r).assign(&Array1::from(row));
            }
            let head: Vec<usize> = {
                let h = lines.expect_keyword("biases")?;
                lines.parse_all(&h)?
            };
            if head != [l, pair[1]] {
                return Err(lines.error(format!("biases header for layer {l} does not match layer sizes")));
            }
            let b: Vec<f64> = {
                let t = lines.next_tokens()?;
                lines.parse_all(&t)?
            };
            if b.len() != pair[1] {
                return Err(lines.error("bias vector has the wrong length"));
            }
            weights.push(w);
            biases.push(Array1::from(b));
        }
        lines.expect_keyword("end")?;
        DenseNet::from_parts(layer_sizes, activations, weights, biases)
    }
}

/// Whitespace-tokenized line cursor shared by the text formats.
pub(crate) struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        LineReader {
            lines: text.lines().enumerate(),
            line_no: 0,
        }
    }

    pub(crate) fn error(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            reason: reason.into(),
        }
    }

    pub(crate) fn next_tokens(&mut self) -> Result<Vec<&'a str>> {
        for (i, line) in self.lines.by_ref() {
            self.line_no = i + 1;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                return Ok(trimmed.split_whitespace().collect());
            }
        }
        Err(self.error("unexpected end of input"))
    }

    /// Next line, which must start with `keyword`; returns the remaining tokens.
    pub(crate) fn expect_keyword(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let tokens = self.next_tokens()?;
        if tokens.first() != Some(&keyword) {
            return Err(self.error(format!("expected `{keyword}`, found `{}`", tokens.join(" "))));
        }
        Ok(tokens[1..].to_vec())
    }

    pub(crate) fn parse_all<T: std::str::FromStr>(&self, tokens: &[&str]) -> Result<Vec<T>> {
        tokens
            .iter()
            .map(|t| t.parse::<T>().map_err(|_| self.error(format!("cannot parse `{t}`"))))
            .collect()
    }

    pub(crate) fn parse_one<T: std::str::FromStr>(&self, tokens: &[&str]) -> Result<T> {
        match tokens {
            [t] => t.parse::<T>().map_err(|_| self.error(format!("cannot parse `{t}`"))),
            _ => Err(self.error(format!("expected one value, found {}", tokens.len()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_unknown_version() {
        let net = DenseNet::new(&[1, 1], &[Activation::Identity], 0).unwrap();
        let text = net.to_text().replacen("densenet 1", "densenet 9", 1);
        assert!(matches!(DenseNet::from_text(&text), Err(Error::Incompatible(_))));
    }

    #[test]
    fn rejects_truncated_document() {
        let net = DenseNet::new(&[2, 3, 1], &[Activation::Relu, Activation::Tanh], 0).unwrap();
        let text = net.to_text();
        let cut = &text[..text.len() / 2];
        assert!(matches!(DenseNet::from_text(cut), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e6f64..1e6, hidden in 1usize..6) {
            let mut net = DenseNet::new(&[3, hidden, 2], &[Activation::Relu, Activation::Softmax], seed).unwrap();
            let p: Vec<f64> = net.params_flat().iter().map(|x| x * scale).collect();
            net.set_params_flat(&p).unwrap();
            let back = DenseNet::from_text(&net.to_text()).unwrap();
            let bits = |n: &DenseNet| n.params_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&net), bits(&back));
            prop_assert_eq!(back.activations(), net.activations());
        }
    }
}
