use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::routing::{CouplingGrad, DrAgreement, RoutingKind, RoutingSpec};

/// Size and routing of one routed capsule layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsLayerConfig {
    pub capsules: usize,
    pub dim: usize,
    pub routing: RoutingKind,
    pub iterations: usize,
}

impl CapsLayerConfig {
    pub const fn new(capsules: usize, dim: usize, routing: RoutingKind, iterations: usize) -> Self {
        CapsLayerConfig {
            capsules,
            dim,
            routing,
            iterations,
        }
    }
}

/// Routing ablation arms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RoutingMode {
    /// Per-layer routing as configured (ER in PointCapA, DR elsewhere).
    #[default]
    PointCaps,
    AllDr,
    AllEr,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::PointCaps => "pointcaps",
            RoutingMode::AllDr => "all_dr",
            RoutingMode::AllEr => "all_er",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pointcaps" => Ok(RoutingMode::PointCaps),
            "all_dr" => Ok(RoutingMode::AllDr),
            "all_er" => Ok(RoutingMode::AllEr),
            other => Err(Error::Config(format!("unknown routing mode `{other}`"))),
        }
    }
}

/// Complete architecture and loss description.
///
/// Encoder, path B: `conv3 -> primary (PointCapA) -> entity (PointCapC) ->
/// parts (PointCapB) -> regen (PointCapA)`. Path A: `point_caps`
/// (PointCapA) directly on the conv2 features. Both paths are concatenated
/// along the capsule axis and fed to the class capsules.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_points: usize,
    pub num_classes: usize,
    /// 3 for xyz, 6 for xyz plus normals.
    pub input_channels: usize,
    pub conv_widths: [usize; 3],
    pub primary_caps: CapsLayerConfig,
    /// PointCapC output `(capsules, dim)`.
    pub entity_caps: (usize, usize),
    pub part_caps: CapsLayerConfig,
    pub regen_caps: CapsLayerConfig,
    pub point_caps: CapsLayerConfig,
    pub digit_dim: usize,
    pub digit_routing: RoutingKind,
    pub digit_iterations: usize,
    pub decoder_dense: usize,
    /// Output channels of the two upsampling deconvolutions followed by the
    /// first two 1x1 deconvolutions; the last layer always emits 3.
    pub decoder_widths: [usize; 4],
    pub upsample_stride: usize,
    pub gamma: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub skip_connection: bool,
    pub routing_mode: RoutingMode,
    pub coupling_grad: CouplingGrad,
    pub dr_agreement: DrAgreement,
    pub use_bias: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Full-size architecture: widths 16/64/256, PointCapA (64, 32),
    /// PointCapC (4, 16), PointCapB (8, 16), class capsules of dimension 16.
    pub fn paper(num_points: usize, num_classes: usize) -> Self {
        use RoutingKind::{Dynamic, Euclidean};
        ModelConfig {
            num_points,
            num_classes,
            input_channels: 3,
            conv_widths: [16, 64, 256],
            primary_caps: CapsLayerConfig::new(64, 32, Euclidean, 1),
            entity_caps: (4, 16),
            part_caps: CapsLayerConfig::new(8, 16, Dynamic, 3),
            regen_caps: CapsLayerConfig::new(64, 32, Euclidean, 3),
            point_caps: CapsLayerConfig::new(64, 32, Euclidean, 3),
            digit_dim: 16,
            digit_routing: Dynamic,
            digit_iterations: 3,
            decoder_dense: 128,
            decoder_widths: [32, 64, 32, 16],
            upsample_stride: 4,
            gamma: 0.5,
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            skip_connection: true,
            routing_mode: RoutingMode::PointCaps,
            coupling_grad: CouplingGrad::Unrolled,
            dr_agreement: DrAgreement::Dot,
            use_bias: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    /// Desk-scale model: widths 4/8/16 and every capsule size divided by
    /// four. The dense layer keeps its 128 units; the second decoder width
    /// stays at 8 to match conv2 for the skip connection.
    pub fn micro(num_points: usize, num_classes: usize) -> Self {
        use RoutingKind::{Dynamic, Euclidean};
        ModelConfig {
            conv_widths: [4, 8, 16],
            primary_caps: CapsLayerConfig::new(16, 8, Euclidean, 1),
            entity_caps: (1, 4),
            part_caps: CapsLayerConfig::new(2, 4, Dynamic, 3),
            regen_caps: CapsLayerConfig::new(16, 8, Euclidean, 3),
            point_caps: CapsLayerConfig::new(16, 8, Euclidean, 3),
            digit_dim: 4,
            decoder_dense: 128,
            decoder_widths: [8, 8, 8, 4],
            ..Self::paper(num_points, num_classes)
        }
    }

    /// Every width and capsule size of [`ModelConfig::paper`] halved.
    pub fn tiny(num_points: usize, num_classes: usize) -> Self {
        use RoutingKind::{Dynamic, Euclidean};
        ModelConfig {
            conv_widths: [8, 32, 128],
            primary_caps: CapsLayerConfig::new(32, 16, Euclidean, 1),
            entity_caps: (2, 8),
            part_caps: CapsLayerConfig::new(4, 8, Dynamic, 3),
            regen_caps: CapsLayerConfig::new(32, 16, Euclidean, 3),
            point_caps: CapsLayerConfig::new(32, 16, Euclidean, 3),
            digit_dim: 8,
            decoder_dense: 64,
            decoder_widths: [16, 32, 16, 8],
            ..Self::paper(num_points, num_classes)
        }
    }

    fn effective(&self, configured: RoutingKind) -> RoutingKind {
        match self.routing_mode {
            RoutingMode::PointCaps => configured,
            RoutingMode::AllDr => RoutingKind::Dynamic,
            RoutingMode::AllEr => RoutingKind::Euclidean,
        }
    }

    /// Routing actually used by a layer once the ablation mode is applied.
    pub fn routing_spec(&self, layer: &CapsLayerConfig) -> RoutingSpec {
        self.spec(layer.routing, layer.iterations)
    }

    pub fn digit_routing_spec(&self) -> RoutingSpec {
        self.spec(self.digit_routing, self.digit_iterations)
    }

    fn spec(&self, kind: RoutingKind, iterations: usize) -> RoutingSpec {
        RoutingSpec {
            kind: self.effective(kind),
            iterations,
            agreement: self.dr_agreement,
            coupling_grad: self.coupling_grad,
        }
    }

    /// Width of the decoder grid right after the dense layer.
    pub fn decoder_base_width(&self) -> usize {
        self.num_points / (self.upsample_stride * self.upsample_stride)
    }

    /// Number of child capsules entering the second PointCapA.
    pub fn regen_inputs(&self) -> usize {
        self.primary_caps.capsules * self.part_caps.capsules
    }

    /// Number of capsules entering the class-capsule layer.
    pub fn digit_inputs(&self) -> usize {
        self.regen_caps.capsules + self.point_caps.capsules
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 1 {
            return fail("num_classes must be at least 1".into());
        }
        if self.input_channels != 3 && self.input_channels != 6 {
            return fail(format!("input_channels must be 3 or 6, got {}", self.input_channels));
        }
        let sizes = [
            self.conv_widths.iter().copied().min().unwrap(),
            self.entity_caps.0,
            self.entity_caps.1,
            self.digit_dim,
            self.decoder_dense,
            self.decoder_widths.iter().copied().min().unwrap(),
            self.upsample_stride,
        ];
        if sizes.contains(&0) {
            return fail("all layer sizes must be positive".into());
        }
        for (name, l) in self.caps_layers() {
            if l.capsules == 0 || l.dim == 0 || l.iterations == 0 {
                return fail(format!("{name}: capsules, dim and iterations must be positive"));
            }
        }
        if self.digit_iterations == 0 {
            return fail("digit routing needs at least one iteration".into());
        }
        let up = self.upsample_stride * self.upsample_stride;
        if self.num_points < up || self.num_points % up != 0 {
            return fail(format!(
                "num_points {} must be a positive multiple of {up}",
                self.num_points
            ));
        }
        if self.decoder_dense % self.decoder_base_width() != 0 {
            return fail(format!(
                "decoder dense width {} not divisible by grid width {}",
                self.decoder_dense,
                self.decoder_base_width()
            ));
        }
        if self.skip_connection && self.decoder_widths[1] != self.conv_widths[1] {
            return fail(format!(
                "skip connection needs decoder width {} to equal conv2 width {}",
                self.decoder_widths[1], self.conv_widths[1]
            ));
        }
        if self.regen_caps.dim != self.point_caps.dim {
            return fail("both encoder paths must end in capsules of the same dimension".into());
        }
        if !(self.gamma >= 0.0) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return fail(format!(
                "margins need 0 <= m- < m+ <= 1, got m-={} m+={}",
                self.m_minus, self.m_plus
            ));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return fail("bn momentum must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    fn caps_layers(&self) -> [(&'static str, &CapsLayerConfig); 4] {
        [
            ("path_b.primary", &self.primary_caps),
            ("path_b.parts", &self.part_caps),
            ("path_b.regen", &self.regen_caps),
            ("path_a", &self.point_caps),
        ]
    }

    /// Serialises to the flat `key = value` text format.
    pub fn to_text(&self) -> String {
        let caps = |l: &CapsLayerConfig| format!("{},{},{},{}", l.capsules, l.dim, l.routing, l.iterations);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_points", self.num_points.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("input_channels", self.input_channels.to_string());
        kv("conv_widths", list(&self.conv_widths));
        kv("path_b.primary", caps(&self.primary_caps));
        kv("path_b.entity", format!("{},{}", self.entity_caps.0, self.entity_caps.1));
        kv("path_b.parts", caps(&self.part_caps));
        kv("path_b.regen", caps(&self.regen_caps));
        kv("path_a", caps(&self.point_caps));
        kv(
            "digit",
            format!("{},{},{}", self.digit_dim, self.digit_routing, self.digit_iterations),
        );
        kv("decoder.dense", self.decoder_dense.to_string());
        kv("decoder.widths", list(&self.decoder_widths));
        kv("decoder.stride", self.upsample_stride.to_string());
        kv("loss.gamma", self.gamma.to_string());
        kv("loss.m_plus", self.m_plus.to_string());
        kv("loss.m_minus", self.m_minus.to_string());
        kv("loss.lambda", self.lambda.to_string());
        kv("skip_connection", self.skip_connection.to_string());
        kv("routing_mode", self.routing_mode.to_string());
        kv(
            "coupling_grad",
            match self.coupling_grad {
                CouplingGrad::Unrolled => "unrolled",
                CouplingGrad::StopGradient => "stop",
            }
            .into(),
        );
        kv(
            "dr_agreement",
            match self.dr_agreement {
                DrAgreement::Dot => "dot",
                DrAgreement::Cosine => "cosine",
            }
            .into(),
        );
        kv("use_bias", self.use_bias.to_string());
        kv("bn.momentum", self.bn_momentum.to_string());
        kv("bn.eps", self.bn_eps.to_string());
        s
    }

    /// Parses the `key = value` format. Keys missing from the text keep the
    /// values of [`ModelConfig::paper`] with the given point and class counts
    /// (2048 points and 40 classes when those keys are absent too).
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ModelConfig::paper(2048, 40);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value).map_err(|e| perr(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Sets one field from its textual key and value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid number `{v}`")))
        }
        fn list<const N: usize>(v: &str) -> Result<[usize; N]> {
            let items: Vec<usize> = v.split(',').map(num).collect::<Result<_>>()?;
            items
                .try_into()
                .map_err(|_| Error::Config(format!("expected {N} comma-separated values, got `{v}`")))
        }
        fn caps(v: &str) -> Result<CapsLayerConfig> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(Error::Config(format!(
                    "expected `capsules,dim,routing,iterations`, got `{v}`"
                )));
            }
            Ok(CapsLayerConfig {
                capsules: num(parts[0])?,
                dim: num(parts[1])?,
                routing: parts[2].parse()?,
                iterations: num(parts[3])?,
            })
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}`"))),
            }
        }
        match key {
            "num_points" => self.num_points = num(value)?,
            "num_classes" => self.num_classes = num(value)?,
            "input_channels" => self.input_channels = num(value)?,
            "conv_widths" => self.conv_widths = list(value)?,
            "path_b.primary" => self.primary_caps = caps(value)?,
            "path_b.entity" => {
                let [c, d] = list(value)?;
                self.entity_caps = (c, d);
            }
            "path_b.parts" => self.part_caps = caps(value)?,
            "path_b.regen" => self.regen_caps = caps(value)?,
            "path_a" => self.point_caps = caps(value)?,
            "digit" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("expected `dim,routing,iterations`, got `{value}`")));
                }
                self.digit_dim = num(parts[0])?;
                self.digit_routing = parts[1].parse()?;
                self.digit_iterations = num(parts[2])?;
            }
            "decoder.dense" => self.decoder_dense = num(value)?,
            "decoder.widths" => self.decoder_widths = list(value)?,
            "decoder.stride" => self.upsample_stride = num(value)?,
            "loss.gamma" => self.gamma = num(value)?,
            "loss.m_plus" => self.m_plus = num(value)?,
            "loss.m_minus" => self.m_minus = num(value)?,
            "loss.lambda" => self.lambda = num(value)?,
            "skip_connection" => self.skip_connection = boolean(value)?,
            "routing_mode" => self.routing_mode = value.parse()?,
            "coupling_grad" => {
                self.coupling_grad = match value {
                    "unrolled" => CouplingGrad::Unrolled,
                    "stop" | "stop_gradient" => CouplingGrad::StopGradient,
                    _ => return Err(Error::Config(format!("unknown coupling_grad `{value}`"))),
                }
            }
            "dr_agreement" => {
                self.dr_agreement = match value {
                    "dot" => DrAgreement::Dot,
                    "cosine" => DrAgreement::Cosine,
                    _ => return Err(Error::Config(format!("unknown dr_agreement `{value}`"))),
                }
            }
            "use_bias" => self.use_bias = boolean(value)?,
            "bn.momentum" => self.bn_momentum = num(value)?,
            "bn.eps" => self.bn_eps = num(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper(2048, 13).validate().unwrap();
        ModelConfig::paper(1024, 40).validate().unwrap();
        ModelConfig::micro(256, 5).validate().unwrap();
        ModelConfig::tiny(32, 2).validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::micro(256, 5);
        cfg.routing_mode = RoutingMode::AllEr;
        cfg.skip_connection = false;
        cfg.gamma = 0.25;
        let back = ModelConfig::from_text(&cfg.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            "num_points = 100",
            "loss.m_minus = 0.95",
            "loss.gamma = -1",
            "routing_mode = all_em",
            "mystery = 3",
            "no equals sign",
        ];
        for text in bad {
            assert!(ModelConfig::from_text(text, Path::new("mem")).is_err(), "{text}");
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let err = ModelConfig::from_text("# header\nnum_points = 256\nconv_widths = 1,2\n", Path::new("c.txt"))
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ablation_modes_override_routing() {
        let mut cfg = ModelConfig::paper(2048, 10);
        assert_eq!(cfg.routing_spec(&cfg.primary_caps).kind, RoutingKind::Euclidean);
        assert_eq!(cfg.digit_routing_spec().kind, RoutingKind::Dynamic);
        cfg.routing_mode = RoutingMode::AllDr;
        assert_eq!(cfg.routing_spec(&cfg.point_caps).kind, RoutingKind::Dynamic);
        cfg.routing_mode = RoutingMode::AllEr;
        assert_eq!(cfg.digit_routing_spec().kind, RoutingKind::Euclidean);
        assert_eq!(cfg.routing_spec(&cfg.part_caps).kind, RoutingKind::Euclidean);
    }

    #[test]
    fn skip_requires_matching_widths() {
        let mut cfg = ModelConfig::micro(256, 5);
        cfg.decoder_widths[1] = 7;
        assert!(cfg.validate().is_err());
        cfg.skip_connection = false;
        cfg.validate().unwrap();
    }
}
