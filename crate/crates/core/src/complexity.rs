//! Analytic parameter and FLOP accounting.
//!
//! One FLOP unit is one multiply-accumulate. Convolutions cost
//! `C_in·C_out·k²·H_out·W_out / groups`, matrix products `M·K·N`, and
//! softmax, GELU and normalisation one unit per element. Additions and the
//! temperature scaling are not counted.

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{preset, MarformerConfig, Model, LEVELS};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ModuleCost {
    pub params: u64,
    pub flops: f64,
}

impl std::ops::AddAssign for ModuleCost {
    fn add_assign(&mut self, rhs: Self) {
        self.params += rhs.params;
        self.flops += rhs.flops;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub params: u64,
    /// Multiply-accumulates for one forward pass.
    pub flops: f64,
    pub height: usize,
    pub width: usize,
    pub breakdown: IndexMap<String, ModuleCost>,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops / 1e9
    }
}

/// Element count of every parameter tensor, log-temperatures included.
pub fn count_params(model: &Model) -> u64 {
    model.param_count() as u64
}

#[derive(Default)]
struct Tally(ModuleCost);

impl Tally {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, groups: usize, out_hw: usize, bias: bool) {
        self.0.params += (cout * (cin / groups) * k * k + if bias { cout } else { 0 }) as u64;
        self.0.flops += (cin * cout * k * k) as f64 * out_hw as f64 / groups as f64;
    }

    fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.0.flops += (m * k * n) as f64;
    }

    fn elementwise(&mut self, n: usize) {
        self.0.flops += n as f64;
    }

    fn params(&mut self, n: usize) {
        self.0.params += n as u64;
    }
}

fn strided_extent(n: usize, stride: usize) -> usize {
    // 3×3 kernel, padding 1.
    (n + 2 - 3) / stride + 1
}

fn block_cost(cfg: &MarformerConfig, c: usize, heads: usize, h: usize, w: usize) -> ModuleCost {
    let mut t = Tally::default();
    let hw = h * w;
    let (hr, wr) = (strided_extent(h, cfg.spatial_ratio), strided_extent(w, cfg.spatial_ratio));
    let hwr = hr * wr;
    let c_red = c / cfg.channel_ratio;
    let (d, d_red) = (c / heads, c_red / heads);
    let hidden = cfg.hidden_channels(c);

    // norm1
    t.params(c);
    t.elementwise(c * hw);
    // attention projections
    t.conv(c, c, 3, c, hwr, false);
    t.conv(c, c, 1, 1, hwr, false);
    t.conv(c, c, 3, c, hwr, false);
    t.conv(c, c_red, 1, 1, hwr, false);
    t.conv(c, c_red, 1, 1, hw, false);
    t.conv(c_red, c_red, 3, c_red, hw, false);
    for _ in 0..heads {
        t.matmul(d, hwr, d_red);
        t.elementwise(d * d_red);
        t.matmul(d, d_red, hw);
    }
    t.conv(c, c, 1, 1, hw, false);
    t.params(heads);
    // norm2
    t.params(c);
    t.elementwise(c * hw);
    // feed-forward
    t.conv(c, hidden, 1, 1, hw, false);
    t.elementwise(hidden * hw);
    t.conv(hidden, hidden, cfg.ffn_kernel, hidden, hw, false);
    t.elementwise(hidden * hw);
    t.conv(hidden, c, 1, 1, hw, false);
    t.0
}

/// Walks the network for an `h × w` input and tallies every layer.
pub fn estimate_flops(config: &MarformerConfig, h: usize, w: usize) -> Result<CostReport> {
    config.validate()?;
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!("input {h}x{w} must be divisible by 8")));
    }
    let mut breakdown = IndexMap::new();
    let c0 = config.base_channels;

    let mut stem = Tally::default();
    stem.conv(1, c0, 3, 1, h * w, true);
    breakdown.insert("stem".to_string(), stem.0);

    let res = |k: usize| (h >> k, w >> k);
    for k in 0..LEVELS {
        let (hk, wk) = res(k);
        let c = config.level_channels(k);
        for j in 0..config.blocks[k] {
            breakdown.insert(format!("enc{}.block{j}", k + 1), block_cost(config, c, config.heads[k], hk, wk));
        }
        let mut down = Tally::default();
        down.conv(4 * c, config.level_channels(k + 1), 1, 1, (hk / 2) * (wk / 2), false);
        breakdown.insert(format!("down{}", k + 1), down.0);
    }
    let (hb, wb) = res(LEVELS);
    for j in 0..config.blocks[LEVELS] {
        let cost = block_cost(config, config.level_channels(LEVELS), config.heads[LEVELS], hb, wb);
        breakdown.insert(format!("bottleneck.block{j}"), cost);
    }
    for k in (0..LEVELS).rev() {
        let (hk, wk) = res(k);
        let c = config.level_channels(k);
        let mut up = Tally::default();
        up.conv(config.level_channels(k + 1), 4 * c, 1, 1, (hk / 2) * (wk / 2), false);
        breakdown.insert(format!("up{}", k + 1), up.0);
        let mut reduce = Tally::default();
        reduce.conv(2 * c, c, 1, 1, hk * wk, false);
        breakdown.insert(format!("reduce{}", k + 1), reduce.0);
        for j in 0..config.blocks[k] {
            breakdown.insert(format!("dec{}.block{j}", k + 1), block_cost(config, c, config.heads[k], hk, wk));
        }
    }
    let mut out = Tally::default();
    out.conv(c0, 1, 3, 1, h * w, true);
    breakdown.insert("output".to_string(), out.0);

    let mut total = ModuleCost::default();
    for v in breakdown.values() {
        total += *v;
    }
    Ok(CostReport { params: total.params, flops: total.flops, height: h, width: w, breakdown })
}

/// Cost of the channel-wise similarity against the spatial-wise comparator:
/// `(C·C'·H'W' + C·C'·HW, C·(HW)²)`.
pub fn attention_cost_comparison(c: u64, c_red: u64, h: u64, w: u64, hr: u64, wr: u64) -> (u64, u64) {
    let hw = h * w;
    (c * c_red * hr * wr + c * c_red * hw, c * hw * hw)
}

/// One configuration of an ablation study together with its reported cost.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    /// `None` for rows that carry no network (the degraded input).
    pub config: Option<MarformerConfig>,
    pub reported_params_m: Option<f64>,
    pub reported_gflops: Option<f64>,
}

fn variant(label: &str, config: MarformerConfig, params_m: f64, gflops: f64) -> Variant {
    Variant {
        label: label.to_string(),
        config: Some(config),
        reported_params_m: Some(params_m),
        reported_gflops: Some(gflops),
    }
}

/// Presets `L`, `B`, `T` with their reported costs at 400×400.
pub fn preset_variants() -> Vec<Variant> {
    [("L", 11.76, 60.25), ("B", 6.88, 46.20), ("T", 0.40, 12.82)]
        .into_iter()
        .map(|(n, p, f)| variant(&format!("MARformer-{n}"), preset(n).unwrap(), p, f))
        .collect()
}

/// Ablation variants of the `L` preset.
///
/// * `table2`: attention down-sampling ratios (spatial `S↓r`, channel `C↓r`).
/// * `table3a`: P2FFN depth-wise kernel size `p`.
/// * `table3b`: P2FFN expansion factor `γ`.
pub fn ablation(name: &str) -> Result<Vec<Variant>> {
    let base = preset("L")?;
    let with = |f: &dyn Fn(&mut MarformerConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let rows = match name {
        "table2" => {
            let mut rows = vec![Variant {
                label: "MA".into(),
                config: None,
                reported_params_m: None,
                reported_gflops: None,
            }];
            let ratios: [(&str, usize, usize, f64, f64); 7] = [
                ("baseline", 1, 1, 13.30, 82.00),
                ("S↓2", 2, 1, 13.30, 67.17),
                ("C↓2", 1, 2, 11.76, 71.06),
                ("S↓2 C↓2", 2, 2, 11.76, 60.25),
                ("S↓4 C↓4", 4, 4, 10.99, 54.60),
                ("S↓8 C↓8", 8, 8, 10.61, 52.63),
                ("S↓16 C↓16", 16, 16, 10.42, 51.80),
            ];
            rows.extend(ratios.into_iter().map(|(label, rs, rc, p, f)| {
                variant(label, with(&|c| {
                    c.spatial_ratio = rs;
                    c.channel_ratio = rc;
                }), p, f)
            }));
            rows
        }
        "table3a" => [(3, 11.46, 55.95), (5, 11.52, 57.67), (7, 11.76, 60.25), (9, 12.09, 63.69)]
            .into_iter()
            .map(|(p, pm, f)| variant(&format!("p={p}"), with(&|c| c.ffn_kernel = p), pm, f))
            .collect(),
        "table3b" => [(1.0, 8.48, 41.39), (2.0, 11.76, 60.25), (3.0, 15.04, 79.10), (4.0, 18.32, 97.96)]
            .into_iter()
            .map(|(g, pm, f)| variant(&format!("γ={g}"), with(&|c| c.expansion = g), pm, f))
            .collect(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation `{other}` (expected table2, table3a or table3b)"
            )))
        }
    };
    Ok(rows)
}
