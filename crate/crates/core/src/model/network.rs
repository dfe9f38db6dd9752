use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, BlockParams, DrsaParams, FfnParams};
use super::{MarformerConfig, LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{DType, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
struct Arch {
    stem: (usize, usize),
    enc: [Vec<BlockParams<usize>>; LEVELS],
    down: [usize; LEVELS],
    bottleneck: Vec<BlockParams<usize>>,
    /// `up[k]` lifts level `k + 1` (or the bottleneck) back to level `k`.
    up: [usize; LEVELS],
    reduce: [usize; LEVELS],
    dec: [Vec<BlockParams<usize>>; LEVELS],
    output: (usize, usize),
}

struct Registry {
    params: IndexMap<String, Tensor>,
    inits: Vec<Init>,
    dtype: DType,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let idx = self.params.len();
        let prev = self.params.insert(name, Tensor::zeros(shape, self.dtype));
        assert!(prev.is_none(), "duplicate parameter name");
        self.inits.push(init);
        idx
    }

    fn conv(&mut self, name: String, cout: usize, cin_per_group: usize, k: usize) -> usize {
        self.add(name, &[cout, cin_per_group, k, k], Init::FanIn(cin_per_group * k * k))
    }

    fn block(&mut self, prefix: &str, cfg: &MarformerConfig, c: usize, heads: usize) -> BlockParams<usize> {
        let c_red = c / cfg.channel_ratio;
        let hidden = cfg.hidden_channels(c);
        let p = cfg.ffn_kernel;
        BlockParams {
            norm1: self.add(format!("{prefix}.norm1.weight"), &[c], Init::Ones),
            drsa: DrsaParams {
                q_dw: self.conv(format!("{prefix}.drsa.q_dw.weight"), c, 1, 3),
                q_pw: self.conv(format!("{prefix}.drsa.q_pw.weight"), c, c, 1),
                k_dw: self.conv(format!("{prefix}.drsa.k_dw.weight"), c, 1, 3),
                k_pw: self.conv(format!("{prefix}.drsa.k_pw.weight"), c_red, c, 1),
                v_pw: self.conv(format!("{prefix}.drsa.v_pw.weight"), c_red, c, 1),
                v_dw: self.conv(format!("{prefix}.drsa.v_dw.weight"), c_red, 1, 3),
                proj: self.conv(format!("{prefix}.drsa.proj.weight"), c, c, 1),
                temperature: self.add(format!("{prefix}.drsa.temperature"), &[heads], Init::Zeros),
            },
            norm2: self.add(format!("{prefix}.norm2.weight"), &[c], Init::Ones),
            ffn: FfnParams {
                expand: self.conv(format!("{prefix}.ffn.expand.weight"), hidden, c, 1),
                dw: self.conv(format!("{prefix}.ffn.dw.weight"), hidden, 1, p),
                shrink: self.conv(format!("{prefix}.ffn.shrink.weight"), c, hidden, 1),
            },
        }
    }

    fn level(&mut self, prefix: &str, cfg: &MarformerConfig, k: usize) -> Vec<BlockParams<usize>> {
        let (c, heads) = (cfg.level_channels(k), cfg.heads[k]);
        (0..cfg.blocks[k]).map(|j| self.block(&format!("{prefix}.block{j}"), cfg, c, heads)).collect()
    }
}

/// A built network: configuration, named parameters in a fixed order, and
/// the index layout used to wire them into a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: MarformerConfig,
    dtype: DType,
    params: IndexMap<String, Tensor>,
    arch: Arch,
}

/// Builds an `f32` model with seeded initial weights.
pub fn build_model(config: &MarformerConfig, seed: u64) -> Result<Model> {
    build_model_with_dtype(config, seed, DType::F32)
}

pub fn build_model_with_dtype(config: &MarformerConfig, seed: u64, dtype: DType) -> Result<Model> {
    config.validate()?;
    let mut reg = Registry { params: IndexMap::new(), inits: Vec::new(), dtype };
    let c0 = config.base_channels;
    let stem_w = reg.conv("stem.weight".into(), c0, 1, 3);
    let stem_b = reg.add("stem.bias".into(), &[c0], Init::FanIn(9));

    let mut enc: [Vec<BlockParams<usize>>; LEVELS] = Default::default();
    let mut down = [0; LEVELS];
    for k in 0..LEVELS {
        enc[k] = reg.level(&format!("enc{}", k + 1), config, k);
        let (c, c_next) = (config.level_channels(k), config.level_channels(k + 1));
        down[k] = reg.conv(format!("down{}.weight", k + 1), c_next, 4 * c, 1);
    }
    let bottleneck = reg.level("bottleneck", config, LEVELS);

    let mut up = [0; LEVELS];
    let mut reduce = [0; LEVELS];
    let mut dec: [Vec<BlockParams<usize>>; LEVELS] = Default::default();
    for k in (0..LEVELS).rev() {
        let (c, c_deeper) = (config.level_channels(k), config.level_channels(k + 1));
        up[k] = reg.conv(format!("up{}.weight", k + 1), 4 * c, c_deeper, 1);
        reduce[k] = reg.conv(format!("reduce{}.weight", k + 1), c, 2 * c, 1);
        dec[k] = reg.level(&format!("dec{}", k + 1), config, k);
    }
    let out_w = reg.add("output.weight".into(), &[1, c0, 3, 3], Init::Zeros);
    let out_b = reg.add("output.bias".into(), &[1], Init::Zeros);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (t, init) in reg.params.values_mut().zip(&reg.inits) {
        match *init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for i in 0..t.len() {
                    t.set(i, rng.gen_range(-bound..bound));
                }
            }
            Init::Ones => t.data_mut().fill(1.0),
            Init::Zeros => t.data_mut().fill(0.0),
        }
    }

    Ok(Model {
        config: config.clone(),
        dtype,
        params: reg.params,
        arch: Arch { stem: (stem_w, stem_b), enc, down, bottleneck, up, reduce, dec, output: (out_w, out_b) },
    })
}

/// Restores `input: [1, H, W]` and returns `Î = I + R`.
pub fn model_forward(model: &Model, input: &Tensor) -> Result<Tensor> {
    model.forward(input)
}

impl Model {
    pub fn config(&self) -> &MarformerConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Total number of scalar parameters, log-temperatures included.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param_at(&self, index: usize) -> &Tensor {
        &self.params[index]
    }

    pub fn param_at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index]
    }

    /// Per-head log-temperatures of every attention layer.
    pub fn temperatures(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params().filter(|(k, _)| k.ends_with(".temperature"))
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .values()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [1, h, w] = *input.shape() else {
            return shape_err(format!("model input must be [1, H, W], got {:?}", input.shape()));
        };
        self.config.check_input_extent(h, w)
    }

    /// Records the residual branch `R` for `input` (bound via `vars`).
    pub fn residual_graph(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vars bound for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let a = &self.arch;
        let rs = cfg.spatial_ratio;
        let bind = |b: &BlockParams<usize>| b.map(|&i| vars[i]);

        let mut x = g.conv2d(input, vars[a.stem.0], Some(vars[a.stem.1]), 1, 1, 1)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            for b in &a.enc[k] {
                x = layers::block(g, x, &bind(b), cfg.heads[k], rs)?;
            }
            skips.push(x);
            x = layers::downsample(g, x, vars[a.down[k]])?;
        }
        for b in &a.bottleneck {
            x = layers::block(g, x, &bind(b), cfg.heads[LEVELS], rs)?;
        }
        for k in (0..LEVELS).rev() {
            x = layers::upsample(g, x, vars[a.up[k]])?;
            x = g.concat(&[x, skips[k]])?;
            x = g.conv2d(x, vars[a.reduce[k]], None, 1, 0, 1)?;
            for b in &a.dec[k] {
                x = layers::block(g, x, &bind(b), cfg.heads[k], rs)?;
            }
        }
        g.conv2d(x, vars[a.output.0], Some(vars[a.output.1]), 1, 1, 1)
    }

    /// Records the full restoration `Î = I + R`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        let r = self.residual_graph(g, vars, input)?;
        g.add(input, r)
    }

    /// The residual `R` the network adds to `input`.
    pub fn residual(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let r = self.residual_graph(&mut g, &vars, x)?;
        Ok(g.value(r).clone())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    /// L1 loss of the restoration against `target` and its gradient with
    /// respect to every parameter, in parameter order.
    pub fn loss_and_grads(&self, input: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(input)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let x = g.constant(input.clone());
        let t = g.constant(target.clone());
        let y = self.forward_graph(&mut g, &vars, x)?;
        let loss = g.l1_loss(y, t)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(self.params.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape(), DType::F64)))
            .collect();
        Ok((value, out))
    }

    /// Replaces parameter values in order, e.g. after loading a checkpoint.
    pub(crate) fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for ((name, slot), v) in self.params.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v.to_dtype(self.dtype);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    fn tiny() -> MarformerConfig {
        MarformerConfig {
            base_channels: 8,
            expansion: 2.0,
            ffn_kernel: 3,
            spatial_ratio: 2,
            channel_ratio: 2,
            blocks: [1, 1, 1, 1],
            heads: [1, 1, 2, 2],
            fixed_width: false,
        }
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let m = build_model(&tiny(), 0).unwrap();
        let names: Vec<_> = m.params().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names.first().unwrap(), "stem.weight");
        assert_eq!(names.last().unwrap(), "output.bias");
        assert!(names.contains(&"enc1.block0.drsa.q_pw.weight".to_string()));
        assert!(names.contains(&"bottleneck.block0.ffn.dw.weight".to_string()));
        let m2 = build_model(&tiny(), 0).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn temperatures_one_per_head() {
        let m = build_model(&tiny(), 0).unwrap();
        let heads: Vec<usize> = m.temperatures().map(|(_, t)| t.len()).collect();
        // enc1, enc2, enc3, bottleneck, dec3, dec2, dec1
        assert_eq!(heads, [1, 1, 2, 2, 2, 1, 1]);
    }

    #[test]
    fn identity_at_init_and_shape() {
        let m = build_model(&tiny(), 3).unwrap();
        let x = Tensor::from_f32(&[1, 32, 16], &(0..512).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<_>>())
            .unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y, x);
        let r = m.residual(&x).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_model(&tiny(), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 20, 16], DType::F32)).is_err());
        assert!(m.forward(&Tensor::zeros(&[2, 16, 16], DType::F32)).is_err());
        let mut bad = preset("L").unwrap();
        bad.ffn_kernel = 2;
        assert!(build_model(&bad, 0).is_err());
    }
}
