//! The full dual-objective segmentation network: a shared encoder with a
//! recurrent context block per stage, two structurally identical decoders
//! fed through attention-gated multi-scale skips, and a joint prediction
//! formed by the element-wise product of the two probability maps.

use crate::error::{Error, Result};
use crate::graph::{GradGraph, GraphMark, Var};
use crate::kernels::avgpool2x2;
use crate::layers::{BatchNorm2d, Conv2d, Mode, ParamList, TConv2d};
use crate::rcem::{MultiScaleSkip, RcemBlock, SkipBundle};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;
use std::io::{BufRead, BufReader, Read, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct DonetConfig {
    pub input_channels: usize,
    /// (height, width), each divisible by 2^stages.
    pub input_size: (usize, usize),
    pub base_channels: usize,
    pub stages: usize,
    pub dilation_rates: Vec<usize>,
    pub use_rcem: bool,
    pub use_dual: bool,
    pub use_pyramid_inputs: bool,
}

impl Default for DonetConfig {
    fn default() -> Self {
        DonetConfig {
            input_channels: 3,
            input_size: (64, 64),
            base_channels: 16,
            stages: 4,
            dilation_rates: vec![1, 2, 4, 8],
            use_rcem: true,
            use_dual: true,
            use_pyramid_inputs: true,
        }
    }
}

impl DonetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let div = 1 << self.stages;
        if self.stages < 1 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by 2^stages = {div}"
            )));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.dilation_rates.is_empty()
            || !self.dilation_rates.windows(2).all(|p| p[0] < p[1])
        {
            return Err(Error::Config(format!(
                "dilation rates must be non-empty and strictly ascending, got {:?}",
                self.dilation_rates
            )));
        }
        Ok(())
    }

    /// Channel width at encoder stage k.
    fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

/// The three probability maps: decoder one's, decoder two's, and their
/// element-wise product. With a single decoder all three coincide.
#[derive(Clone, Copy, Debug)]
pub struct PredictionTriple {
    pub y1: Var,
    pub y2: Var,
    pub y_joint: Var,
}

struct EncoderStage<S: Scalar> {
    pyramid: Option<Conv2d>,
    conv: Conv2d,
    bn: BatchNorm2d<S>,
    rcem: Option<RcemBlock>,
}

struct DecoderStage<S: Scalar> {
    /// Attention-gated multi-scale skip when context encoding is on.
    skip: Option<MultiScaleSkip>,
    /// Plain stride-2 upsampling for the classic skip otherwise.
    up: Option<TConv2d>,
    conv: Conv2d,
    bn: BatchNorm2d<S>,
}

struct Decoder<S: Scalar> {
    stages: Vec<DecoderStage<S>>,
    head: Conv2d,
}

enum StageSkip {
    Bundle(SkipBundle),
    Plain(Var),
}

pub struct Donet<S: Scalar> {
    pub cfg: DonetConfig,
    graph: GradGraph<S>,
    enc: Vec<EncoderStage<S>>,
    mid_conv: Conv2d,
    mid_bn: BatchNorm2d<S>,
    dec1: Decoder<S>,
    dec2: Option<Decoder<S>>,
    params: ParamList,
    base: GraphMark,
    seed: u64,
}

fn build_decoder<S: Scalar>(
    g: &mut GradGraph<S>,
    rng: &mut Rng,
    cfg: &DonetConfig,
) -> Decoder<S> {
    let t = cfg.dilation_rates.len();
    let mut stages = Vec::with_capacity(cfg.stages);
    for k in 0..cfg.stages {
        let ch = cfg.width(k);
        let (skip, up, cat_ch) = if cfg.use_rcem {
            let skip = MultiScaleSkip::new(g, rng, ch, &cfg.dilation_rates);
            (Some(skip), None, (t + 1) * ch)
        } else {
            let up = TConv2d::new(g, rng, 2 * ch, ch, 2, 2, 0, true);
            (None, Some(up), 2 * ch)
        };
        let conv = Conv2d::same3x3(g, rng, cat_ch, ch, 1);
        let bn = BatchNorm2d::new(g, ch);
        stages.push(DecoderStage { skip, up, conv, bn });
    }
    let head = Conv2d::new(g, rng, cfg.base_channels, 1, 1, crate::kernels::ConvGeom::unit(), true);
    Decoder { stages, head }
}

impl<S: Scalar> Donet<S> {
    /// Deterministic build: two builds from the same seed are bit-identical.
    pub fn build(cfg: DonetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut g = GradGraph::new();
        let mut rng = Rng::derive(seed, &[0xD0E7]);
        let mut enc = Vec::with_capacity(cfg.stages);
        for k in 0..cfg.stages {
            let ch = cfg.width(k);
            let pyramid = (cfg.use_pyramid_inputs && k > 0)
                .then(|| Conv2d::same3x3(&mut g, &mut rng, cfg.input_channels, ch / 2, 1));
            let in_ch = if k == 0 {
                cfg.input_channels
            } else {
                cfg.width(k - 1) + pyramid.as_ref().map(|p| p.out_ch).unwrap_or(0)
            };
            let conv = Conv2d::same3x3(&mut g, &mut rng, in_ch, ch, 1);
            let bn = BatchNorm2d::new(&mut g, ch);
            let rcem = cfg
                .use_rcem
                .then(|| RcemBlock::new(&mut g, &mut rng, ch, &cfg.dilation_rates));
            enc.push(EncoderStage { pyramid, conv, bn, rcem });
        }
        let top = cfg.width(cfg.stages - 1);
        let mid_conv = Conv2d::same3x3(&mut g, &mut rng, top, 2 * top, 1);
        let mid_bn = BatchNorm2d::new(&mut g, 2 * top);
        let dec1 = build_decoder(&mut g, &mut rng, &cfg);
        let dec2 = cfg.use_dual.then(|| build_decoder(&mut g, &mut rng, &cfg));

        let base = g.mark();
        let mut model = Donet {
            cfg,
            graph: g,
            enc,
            mid_conv,
            mid_bn,
            dec1,
            dec2,
            params: Vec::new(),
            base,
            seed,
        };
        model.params = model.collect_params();
        Ok(model)
    }

    fn collect_params(&self) -> ParamList {
        let mut out = Vec::new();
        for (k, st) in self.enc.iter().enumerate() {
            let p = format!("encoder.stage{k}");
            if let Some(pc) = &st.pyramid {
                pc.collect(&format!("{p}.pyramid"), &mut out);
            }
            st.conv.collect(&format!("{p}.conv"), &mut out);
            st.bn.collect(&format!("{p}.bn"), &mut out);
            if let Some(rc) = &st.rcem {
                rc.collect(&format!("{p}.rcem"), &mut out);
            }
        }
        self.mid_conv.collect("bottleneck.conv", &mut out);
        self.mid_bn.collect("bottleneck.bn", &mut out);
        for (name, dec) in [("decoder1", Some(&self.dec1)), ("decoder2", self.dec2.as_ref())] {
            let Some(dec) = dec else { continue };
            for (k, st) in dec.stages.iter().enumerate() {
                let p = format!("{name}.stage{k}");
                if let Some(skip) = &st.skip {
                    skip.collect(&format!("{p}.skip"), &mut out);
                }
                if let Some(up) = &st.up {
                    up.collect(&format!("{p}.up"), &mut out);
                }
                st.conv.collect(&format!("{p}.conv"), &mut out);
                st.bn.collect(&format!("{p}.bn"), &mut out);
            }
            dec.head.collect(&format!("{name}.head"), &mut out);
        }
        out
    }

    /// Stable (name, slot) list; every trainable tensor appears exactly once.
    pub fn parameters(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, v)| self.graph.value(*v).len()).sum()
    }

    pub fn graph(&self) -> &GradGraph<S> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut GradGraph<S> {
        &mut self.graph
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Named batch-norm running statistics, in a stable order.
    pub fn buffers(&self) -> Vec<(String, Vec<S>)> {
        let mut out = Vec::new();
        for (k, st) in self.enc.iter().enumerate() {
            out.extend(st.bn.buffers(&format!("encoder.stage{k}.bn")));
        }
        out.extend(self.mid_bn.buffers("bottleneck.bn"));
        for (name, dec) in [("decoder1", Some(&self.dec1)), ("decoder2", self.dec2.as_ref())] {
            let Some(dec) = dec else { continue };
            for (k, st) in dec.stages.iter().enumerate() {
                out.extend(st.bn.buffers(&format!("{name}.stage{k}.bn")));
            }
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, data: &[S]) -> Result<()> {
        let bns: Vec<(&str, &mut BatchNorm2d<S>)> = {
            let mut v: Vec<(String, &mut BatchNorm2d<S>)> = Vec::new();
            for (k, st) in self.enc.iter_mut().enumerate() {
                v.push((format!("encoder.stage{k}.bn"), &mut st.bn));
            }
            v.push(("bottleneck.bn".to_string(), &mut self.mid_bn));
            for (dname, dec) in
                [("decoder1", Some(&mut self.dec1)), ("decoder2", self.dec2.as_mut())]
            {
                let Some(dec) = dec else { continue };
                for (k, st) in dec.stages.iter_mut().enumerate() {
                    v.push((format!("{dname}.stage{k}.bn"), &mut st.bn));
                }
            }
            let mut out = Vec::new();
            for (prefix, bn) in v {
                if name.starts_with(&prefix) {
                    out.push(("", bn));
                }
            }
            out
        };
        for (_, bn) in bns {
            if bn.set_buffer(name, data) {
                return Ok(());
            }
        }
        Err(Error::Data(format!("unknown or mis-sized buffer '{name}'")))
    }

    /// Marker for the persistent (parameter) prefix of the tape.
    pub fn mark(&self) -> GraphMark {
        self.base
    }

    /// Drop all per-step intermediates, keeping parameters and their grads.
    pub fn truncate(&mut self) {
        let m = self.base;
        self.graph.truncate(m);
    }

    /// Run the network. Train mode uses batch statistics (batch >= 2) and
    /// updates running stats; eval mode is fully deterministic.
    pub fn forward(&mut self, image: &Tensor<S>, mode: Mode) -> PredictionTriple {
        let s = image.shape();
        let (h, w) = self.cfg.input_size;
        assert_eq!(
            (s.c, s.h, s.w),
            (self.cfg.input_channels, h, w),
            "forward: input {s} does not match configured {}x{h}x{w}",
            self.cfg.input_channels
        );
        assert!(s.n >= 1, "forward: empty batch");
        if mode == Mode::Train {
            assert!(s.n >= 2, "forward: train mode needs batch >= 2 for batch norm");
        }

        // pyramid copies of the input, one per downsampled stage
        let pyramid: Vec<Tensor<S>> = if self.cfg.use_pyramid_inputs && self.cfg.stages > 1 {
            pyramid_inputs(image, self.cfg.stages - 1)
        } else {
            Vec::new()
        };

        let Donet { graph: g, enc, mid_conv, mid_bn, dec1, dec2, cfg, .. } = self;
        let mut x = g.leaf(image.clone());
        let mut skips: Vec<StageSkip> = Vec::with_capacity(cfg.stages);
        for (k, st) in enc.iter_mut().enumerate() {
            if k > 0 {
                x = g.maxpool2x2(x);
                if let Some(pc) = &st.pyramid {
                    let p = g.leaf(pyramid[k - 1].clone());
                    let p = pc.forward(g, p);
                    x = g.concat_channels(&[x, p]);
                }
            }
            let c = st.conv.forward(g, x);
            let b = st.bn.forward(g, c, mode);
            let r = g.relu(b);
            match &st.rcem {
                Some(rc) => {
                    let (h_t, bundle) = rc.forward(g, r);
                    skips.push(StageSkip::Bundle(bundle));
                    x = h_t;
                }
                None => {
                    skips.push(StageSkip::Plain(r));
                    x = r;
                }
            }
        }
        let pooled = g.maxpool2x2(x);
        let c = mid_conv.forward(g, pooled);
        let b = mid_bn.forward(g, c, mode);
        let f = g.relu(b);

        let decode = |g: &mut GradGraph<S>, dec: &mut Decoder<S>| -> Var {
            let mut r = f;
            for (k, st) in dec.stages.iter_mut().enumerate().rev() {
                let cat = match (&st.skip, &skips[k]) {
                    (Some(skip), StageSkip::Bundle(bundle)) => skip.forward(g, bundle, r),
                    (None, StageSkip::Plain(feat)) => {
                        let z = st.up.as_ref().expect("plain decoder stage").forward(g, r);
                        g.concat_channels(&[*feat, z])
                    }
                    _ => unreachable!("skip kind fixed by config"),
                };
                let c = st.conv.forward(g, cat);
                let b = st.bn.forward(g, c, mode);
                r = g.relu(b);
            }
            let logit = dec.head.forward(g, r);
            g.sigmoid(logit)
        };

        let y1 = decode(g, dec1);
        match dec2 {
            Some(dec2) => {
                let y2 = decode(g, dec2);
                let y_joint = g.hadamard(y1, y2);
                PredictionTriple { y1, y2, y_joint }
            }
            None => PredictionTriple { y1, y2: y1, y_joint: y1 },
        }
    }
}

/// Repeated 2x2 average pooling of the input image: k-times-pooled copy at
/// index k-1, `stages` entries.
pub fn pyramid_inputs<S: Scalar>(image: &Tensor<S>, stages: usize) -> Vec<Tensor<S>> {
    let s = image.shape();
    assert!(
        s.h % (1 << stages) == 0 && s.w % (1 << stages) == 0,
        "pyramid_inputs: {s} not divisible by 2^{stages}"
    );
    let mut out = Vec::with_capacity(stages);
    let mut cur = image.clone();
    for _ in 0..stages {
        let (data, shape) = avgpool2x2(cur.data(), cur.shape());
        cur = Tensor::from_vec(shape, data);
        out.push(cur.clone());
    }
    out
}

/// Subsampled end-to-end finite-difference check of the full training
/// objective, in f64: a small dual-decoder model with context encoding on
/// a random batch, gradients of every sampled parameter coordinate
/// compared against central differences.
pub fn model_grad_check(
    samples: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> crate::gradcheck::GradCheckReport {
    use crate::gradcheck::{CoordReport, GradCheckReport};
    use crate::losses::{combined_objective, ObjectiveConfig};

    let cfg = DonetConfig {
        input_channels: 3,
        input_size: (16, 16),
        base_channels: 4,
        stages: 4,
        dilation_rates: vec![1, 2, 4, 8],
        use_rcem: true,
        use_dual: true,
        use_pyramid_inputs: true,
    };
    let mut model: Donet<f64> = Donet::build(cfg, seed).expect("valid config");
    let mut rng = Rng::derive(seed, &[0x6C4D]);
    let img = {
        let s = Shape::new(2, 3, 16, 16);
        let data = (0..s.len()).map(|_| rng.range(0.05, 0.95)).collect();
        Tensor::from_vec(s, data)
    };
    let target = {
        let s = Shape::new(2, 1, 16, 16);
        let data = (0..s.len()).map(|_| if rng.coin(0.4) { 1.0 } else { 0.0 }).collect();
        Tensor::<f64>::from_vec(s, data)
    };
    let objective = ObjectiveConfig::default();

    let eval_loss = |m: &mut Donet<f64>| -> f64 {
        m.truncate();
        let triple = m.forward(&img, Mode::Train);
        let g = m.graph_mut();
        let t = g.leaf(target.clone());
        let lv = combined_objective(g, &objective, triple.y1, Some(triple.y2), triple.y_joint, t);
        g.scalar_value(lv.total)
    };

    // analytic pass
    model.truncate();
    let triple = model.forward(&img, Mode::Train);
    let f0 = {
        let g = model.graph_mut();
        let t = g.leaf(target.clone());
        let lv = combined_objective(g, &objective, triple.y1, Some(triple.y2), triple.y_joint, t);
        g.zero_grad();
        g.backward(lv.total);
        g.scalar_value(lv.total)
    };
    let params: Vec<Var> = model.parameters().iter().map(|(_, v)| *v).collect();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&v| {
            model
                .graph()
                .grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; model.graph().value(v).len()])
        })
        .collect();

    let total_coords: usize = analytic.iter().map(|g| g.len()).sum();
    let mut report = GradCheckReport { pass: true, ..Default::default() };
    for _ in 0..samples {
        let mut k = rng.below(total_coords);
        let mut pi = 0;
        while k >= analytic[pi].len() {
            k -= analytic[pi].len();
            pi += 1;
        }
        let var = params[pi];
        let orig = model.graph().data(var)[k];
        let a = analytic[pi][k];

        // Step-size ladder: a +-h nudge occasionally flips a relu sign or
        // pooling argmax somewhere deep in the network, which bends the
        // loss inside the difference stencil. Shrinking h moves the
        // stencil off the crease, so finite differences converge to the
        // analytic slope; a genuinely wrong gradient rule disagrees at
        // every step size.
        let mut best: Option<(f64, f64, bool)> = None; // (numeric, rel_err, sub_noise)
        let mut non_finite = false;
        for hs in [h, h / 4.0, h / 16.0] {
            model.graph_mut().data_mut(var)[k] = orig + hs;
            let fp = eval_loss(&mut model);
            model.graph_mut().data_mut(var)[k] = orig - hs;
            let fm = eval_loss(&mut model);
            model.graph_mut().data_mut(var)[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                non_finite = true;
                break;
            }
            let numeric = (fp - fm) / (2.0 * hs);
            let fscale = f0.abs().max(fp.abs()).max(fm.abs()).max(1.0);
            let noise = 8.0 * f64::EPSILON * fscale / (2.0 * hs);
            let sub = (a - numeric).abs() <= noise;
            let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if best.map(|(_, be, bs)| e < be && !bs).unwrap_or(true) {
                best = Some((numeric, e, sub));
            }
            if sub || e <= tol {
                break;
            }
        }
        if non_finite {
            report.pass = false;
            report.failures.push(CoordReport {
                input: pi,
                coord: k,
                analytic: a,
                numeric: f64::NAN,
                rel_err: f64::INFINITY,
                non_finite: true,
            });
            continue;
        }
        let (numeric, e, sub) = best.expect("at least one ladder step ran");
        report.checked += 1;
        if sub {
            report.sub_noise += 1;
            continue;
        }
        if e > report.max_rel_err {
            report.max_rel_err = e;
        }
        if e > tol {
            report.pass = false;
            report.failures.push(CoordReport {
                input: pi,
                coord: k,
                analytic: a,
                numeric,
                rel_err: e,
                non_finite: false,
            });
        }
    }
    report.failures.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    model.truncate();
    report
}

// ---- checkpoint io ---------------------------------------------------------

const CKPT_MAGIC: &str = "DONET1";

fn cfg_lines(cfg: &DonetConfig, seed: u64) -> String {
    let rates: Vec<String> = cfg.dilation_rates.iter().map(|r| r.to_string()).collect();
    format!(
        "input_channels = {}\ninput_size = {}x{}\nbase_channels = {}\nstages = {}\n\
         dilation_rates = {}\nuse_rcem = {}\nuse_dual = {}\nuse_pyramid_inputs = {}\nseed = {}\n",
        cfg.input_channels,
        cfg.input_size.0,
        cfg.input_size.1,
        cfg.base_channels,
        cfg.stages,
        rates.join(","),
        cfg.use_rcem,
        cfg.use_dual,
        cfg.use_pyramid_inputs,
        seed,
    )
}

pub fn parse_model_config(kv: &std::collections::BTreeMap<String, String>) -> Result<DonetConfig> {
    let mut cfg = DonetConfig::default();
    let get = |k: &str| kv.get(k).cloned();
    if let Some(v) = get("input_channels") {
        cfg.input_channels = parse_num(&v, "input_channels")?;
    }
    if let Some(v) = get("input_size") {
        cfg.input_size = parse_size(&v)?;
    }
    if let Some(v) = get("base_channels") {
        cfg.base_channels = parse_num(&v, "base_channels")?;
    }
    if let Some(v) = get("stages") {
        cfg.stages = parse_num(&v, "stages")?;
    }
    if let Some(v) = get("dilation_rates") {
        cfg.dilation_rates = v
            .split(',')
            .map(|t| parse_num(t.trim(), "dilation_rates"))
            .collect::<Result<Vec<usize>>>()?;
    }
    if let Some(v) = get("use_rcem") {
        cfg.use_rcem = parse_bool(&v, "use_rcem")?;
    }
    if let Some(v) = get("use_dual") {
        cfg.use_dual = parse_bool(&v, "use_dual")?;
    }
    if let Some(v) = get("use_pyramid_inputs") {
        cfg.use_pyramid_inputs = parse_bool(&v, "use_pyramid_inputs")?;
    }
    Ok(cfg)
}

pub fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

pub fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}' for {key}"))),
    }
}

pub fn parse_size(v: &str) -> Result<(usize, usize)> {
    let v = v.trim();
    if let Some((h, w)) = v.split_once('x') {
        Ok((parse_num(h, "input_size")?, parse_num(w, "input_size")?))
    } else {
        let s: usize = parse_num(v, "input_size")?;
        Ok((s, s))
    }
}

impl<S: Scalar> Donet<S> {
    /// Checkpoint layout: "DONET1" header line, key=value config block
    /// (UTF-8), extra key=value lines from the caller, a "[tensors]"
    /// marker, then named tensor dumps: parameters in `parameters()` order
    /// followed by the batch-norm running buffers, each as a name line
    /// plus a DOT1 blob.
    pub fn save_checkpoint<W: Write>(&self, w: &mut W, extra: &[(String, String)]) -> Result<()> {
        writeln!(w, "{CKPT_MAGIC}")?;
        w.write_all(cfg_lines(&self.cfg, self.seed).as_bytes())?;
        for (k, v) in extra {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "[tensors]")?;
        for (name, var) in &self.params {
            writeln!(w, "{name}")?;
            self.graph.value(*var).dump(w)?;
        }
        for (name, data) in self.buffers() {
            writeln!(w, "{name}")?;
            Tensor::from_vec(Shape::new(1, data.len(), 1, 1), data).dump(w)?;
        }
        Ok(())
    }

    /// Rebuild a model from a checkpoint; returns the model plus the extra
    /// key=value lines that were stored alongside the config.
    pub fn load_checkpoint<R: Read>(
        r: &mut R,
    ) -> Result<(Self, std::collections::BTreeMap<String, String>)> {
        let mut br = BufReader::new(r);
        let mut line = String::new();
        br.read_line(&mut line)?;
        if line.trim_end() != CKPT_MAGIC {
            return Err(Error::Data(format!(
                "bad checkpoint header '{}', expected {CKPT_MAGIC}",
                line.trim_end()
            )));
        }
        let mut kv = std::collections::BTreeMap::new();
        loop {
            line.clear();
            if br.read_line(&mut line)? == 0 {
                return Err(Error::Data("checkpoint ended before [tensors]".into()));
            }
            let t = line.trim();
            if t == "[tensors]" {
                break;
            }
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad checkpoint line '{t}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let cfg = parse_model_config(&kv)?;
        let seed: u64 = parse_num(kv.get("seed").map(String::as_str).unwrap_or("0"), "seed")?;
        let mut model = Donet::build(cfg, seed)?;

        let expected: Vec<String> = model
            .params
            .iter()
            .map(|(n, _)| n.clone())
            .chain(model.buffers().into_iter().map(|(n, _)| n))
            .collect();
        for name in expected {
            line.clear();
            if br.read_line(&mut line)? == 0 {
                return Err(Error::Data(format!("checkpoint truncated before tensor '{name}'")));
            }
            let got = line.trim_end();
            if got != name {
                return Err(Error::Data(format!(
                    "checkpoint tensor order mismatch: expected '{name}', found '{got}'"
                )));
            }
            let t: Tensor<S> = Tensor::load(&mut br)?;
            if let Some((_, var)) = model.params.iter().find(|(n, _)| n == got) {
                let var = *var;
                if t.shape() != model.graph.shape(var) {
                    return Err(Error::Data(format!(
                        "checkpoint tensor '{got}' has shape {} but model expects {}",
                        t.shape(),
                        model.graph.shape(var)
                    )));
                }
                model.graph.set_data(var, t.data());
            } else {
                model.set_buffer(got, t.data())?;
            }
        }
        Ok((model, kv))
    }
}
