use rand::Rng;

use super::layers::{he_init, BatchNorm, BnId, BnStat, Linear};
use super::{Network, Recorded, RoutingMask};
use crate::error::{Error, Result};
use crate::numerics::{Mode, Tape, Tensor, Var};

/// `relu(BN(x · Wᵀ))`, square `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfLayer {
    pub weight: Tensor,
    pub bn: BatchNorm,
}

/// Plain stack of uniform-width layers with no skip connections: the
/// input takes a single path from the first layer to the last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardNet {
    pub embed: Linear,
    pub layers: Vec<FfLayer>,
    pub head: Linear,
}

impl FeedforwardNet {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, classes: usize, layers: usize, width: usize, rng: &mut R) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(Error::invalid("a feedforward net needs at least one layer of nonzero width"));
        }
        let embed = Linear::he(input_dim, width, rng);
        let layers = (0..layers)
            .map(|_| FfLayer {
                weight: he_init(width, width, rng),
                bn: BatchNorm::new(width),
            })
            .collect();
        let head = Linear::he(width, classes, rng);
        Self::from_parts(embed, layers, head)
    }

    pub fn from_parts(embed: Linear, layers: Vec<FfLayer>, head: Linear) -> Result<Self> {
        embed.validate("embed")?;
        head.validate("head")?;
        let w = embed.output_dim();
        for (i, l) in layers.iter().enumerate() {
            l.bn.validate(&format!("layer {i}"))?;
            if l.weight.shape() != (w, w) || l.bn.width() != w {
                return Err(Error::invalid(format!("layer {i} does not have width {w}")));
            }
        }
        if head.input_dim() != w {
            return Err(Error::invalid("head input width does not match layer width"));
        }
        Ok(Self { embed, layers, head })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.embed.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    /// Logits with layer `deleted` (if any) left out of the composition.
    pub fn forward(&self, x: &Tensor, deleted: Option<usize>, mode: Mode) -> Result<Tensor> {
        let net = match deleted {
            Some(i) => self.delete_layer(i)?,
            None => self.clone(),
        };
        let mut tape = Tape::new();
        let r = net.record(&mut tape, x, None, mode)?;
        Ok(tape.value(r.logits).clone())
    }

    pub fn delete_layer(&self, i: usize) -> Result<Self> {
        if i >= self.depth() {
            return Err(Error::invalid(format!("layer index {i} out of range for {} layers", self.depth())));
        }
        let mut out = self.clone();
        out.layers.remove(i);
        Ok(out)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("embed.weight".to_string(), self.embed.weight.clone()),
            ("embed.bias".to_string(), self.embed.bias.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.W"), l.weight.clone()));
            super::push_bn(&mut out, &format!("layer.{i}.bn"), &l.bn);
        }
        out.push(("head.weight".to_string(), self.head.weight.clone()));
        out.push(("head.bias".to_string(), self.head.bias.clone()));
        out
    }
}

impl Network for FeedforwardNet {
    fn record_input(&self, tape: &mut Tape, input: Var, mask: Option<&RoutingMask>, mode: Mode) -> Result<Recorded> {
        let shape = tape.value(input).shape();
        if mask.is_some() {
            return Err(Error::invalid("feedforward nets take no routing mask"));
        }
        if shape.1 != self.input_dim() {
            return Err(Error::Dimension {
                op: "ff_forward",
                left: shape,
                right: self.embed.weight.shape(),
            });
        }
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = self.embed.record(tape, input, &mut params)?;
        let mut stream = vec![h];
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone())?;
            params.push(w);
            let z = tape.linear(h, w)?;
            let (z, stats) = layer.bn.record(tape, z, mode, &mut params)?;
            if let Some(stats) = stats {
                bn_stats.push(BnStat { id: BnId { unit: i, slot: 0 }, stats });
            }
            h = tape.relu(z)?;
            stream.push(h);
        }
        let logits = self.head.record(tape, h, &mut params)?;
        Ok(Recorded {
            logits,
            stream,
            params,
            bn_stats,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.embed.params_mut().into_iter().collect();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.extend(l.bn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn blend_batch_stats(&mut self, stats: &[BnStat], keep: f64) {
        for s in stats {
            self.layers[s.id.unit].bn.blend(&s.stats, keep);
        }
    }

    fn units(&self) -> usize {
        self.depth()
    }

    fn delete_unit(&self, i: usize) -> Result<Self> {
        self.delete_layer(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> FeedforwardNet {
        FeedforwardNet::new(2, 3, 5, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn no_deletion_is_plain_composition() {
        let net = net();
        let x = Tensor::randn(6, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut h = x.matmul_nt(&net.embed.weight).unwrap().add_row(&net.embed.bias).unwrap();
        for l in &net.layers {
            let z = h.matmul_nt(&l.weight).unwrap();
            let mut y = Tensor::zeros(z.rows(), z.cols());
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    let v = (z.get(r, c) - l.bn.running_mean[c]) / (l.bn.running_var[c] + crate::numerics::BN_EPS).sqrt();
                    y.set(r, c, (l.bn.gamma.get(0, c) * v + l.bn.beta.get(0, c)).max(0.0));
                }
            }
            h = y;
        }
        let expected = h.matmul_nt(&net.head.weight).unwrap().add_row(&net.head.bias).unwrap();
        let got = net.forward(&x, None, Mode::Eval).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deleting_a_layer_composes_the_rest() {
        let net = net();
        let x = Tensor::randn(6, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut manual = net.clone();
        manual.layers.remove(2);
        assert_eq!(
            net.forward(&x, Some(2), Mode::Eval).unwrap(),
            manual.forward(&x, None, Mode::Eval).unwrap()
        );
        assert!(net.forward(&x, Some(5), Mode::Eval).is_err());
    }

    #[test]
    fn param_order_matches_record() {
        let mut net = net();
        let x = Tensor::randn(4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::new();
        let r = net.record(&mut tape, &x, None, Mode::Train).unwrap();
        let values: Vec<Tensor> = r.params.iter().map(|&v| tape.value(v).clone()).collect();
        let params = net.params_mut();
        assert_eq!(params.len(), values.len());
        for (p, v) in params.iter().zip(&values) {
            assert_eq!(*p, v);
        }
    }
}
