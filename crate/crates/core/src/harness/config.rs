use std::fmt::{self, Write as _};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How attention maps are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSource {
    /// Deterministic per-slice softmax.
    Soft,
    /// Gumbel-softmax samples in training, expected map at test time.
    Prob,
}

/// Which network is trained and how it is supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelRole {
    TeacherFlow,
    StudentBaseline,
    StudentDistill,
    StudentFeatMatch,
    StudentOracleAttn,
}

impl ModelRole {
    pub const ALL: [ModelRole; 5] = [
        ModelRole::TeacherFlow,
        ModelRole::StudentBaseline,
        ModelRole::StudentDistill,
        ModelRole::StudentFeatMatch,
        ModelRole::StudentOracleAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelRole::TeacherFlow => "teacher-flow",
            ModelRole::StudentBaseline => "student-rgb-baseline",
            ModelRole::StudentDistill => "student-rgb-distill",
            ModelRole::StudentFeatMatch => "student-rgb-featmatch",
            ModelRole::StudentOracleAttn => "student-rgb-oracle-attn",
        }
    }

    pub fn is_teacher(self) -> bool {
        self == ModelRole::TeacherFlow
    }

    /// Roles whose training or inference consumes a teacher.
    pub fn needs_teacher(self) -> bool {
        matches!(
            self,
            ModelRole::StudentDistill | ModelRole::StudentFeatMatch | ModelRole::StudentOracleAttn
        )
    }

    /// Number of input channels of the backbone.
    pub fn input_channels(self) -> usize {
        if self.is_teacher() {
            2
        } else {
            3
        }
    }
}

impl FromStr for ModelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}`")))
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learning-rate schedule: divide by `decay` once the epoch-mean loss has
/// failed to improve by a relative `threshold` for `patience` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub patience: usize,
    pub threshold: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.01,
            decay: 10.0,
            patience: 3,
            threshold: 1e-3,
        }
    }
}

/// Plateau tracker driving [`LrSchedule`].
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    schedule: LrSchedule,
    best: f64,
    stale: usize,
    lr: f64,
}

impl Plateau {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            best: f64::INFINITY,
            stale: 0,
            lr: schedule.initial,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's mean loss and return the learning rate for the next epoch.
    pub fn observe(&mut self, epoch_loss: f64) -> f64 {
        let improved = if self.best.is_finite() {
            epoch_loss < self.best - self.schedule.threshold * self.best.abs()
        } else {
            true
        };
        if improved {
            self.best = epoch_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.schedule.patience {
                self.lr /= self.schedule.decay;
                self.stale = 0;
                self.best = epoch_loss.min(self.best);
            }
        }
        self.lr
    }
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub attention: AttentionSource,
    pub residual: bool,
    pub role: ModelRole,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub temperature: f64,
    /// `None` selects `1 / (T'·H'·W')`.
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda_fm: Option<f64>,
    pub seed: u64,
    pub literal_eq4: bool,
    /// Distil from Gumbel samples of the teacher instead of its expected map.
    pub sampled_target: bool,
    pub flip: bool,
    pub widths: Vec<usize>,
    pub attn_channels: usize,
    pub batch_norm: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            attention: AttentionSource::Prob,
            residual: false,
            role: ModelRole::StudentDistill,
            classes: 16,
            epochs: 30,
            batch_size: 8,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 4e-5,
            dropout: 0.5,
            temperature: 1.0,
            lambda1: None,
            lambda2: None,
            lambda_fm: None,
            seed: 0,
            literal_eq4: false,
            sampled_target: false,
            flip: false,
            widths: vec![16, 32, 64],
            attn_channels: 32,
            batch_norm: true,
        }
    }
}

pub const DEFAULT_LAMBDA_FM: f64 = 1.0;

const KEYS: &[&str] = &[
    "mode",
    "role",
    "classes",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "lr_patience",
    "lr_threshold",
    "momentum",
    "weight_decay",
    "dropout",
    "temperature",
    "lambda1",
    "lambda2",
    "lambda_fm",
    "seed",
    "literal_eq4",
    "sampled_target",
    "flip",
    "widths",
    "attn_channels",
    "batch_norm",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{value}`"))),
    }
}

fn parse_lambda(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn show_lambda(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| format!("{x:?}"))
}

impl RunConfig {
    pub fn teacher() -> Self {
        Self {
            role: ModelRole::TeacherFlow,
            ..Self::default()
        }
    }

    pub fn student(role: ModelRole) -> Self {
        Self {
            role,
            ..Self::default()
        }
    }

    /// Mode name: `soft-atten`, `soft-res`, `prob-atten` (or the invalid `prob-res`).
    pub fn mode(&self) -> &'static str {
        match (self.attention, self.residual) {
            (AttentionSource::Soft, false) => "soft-atten",
            (AttentionSource::Soft, true) => "soft-res",
            (AttentionSource::Prob, false) => "prob-atten",
            (AttentionSource::Prob, true) => "prob-res",
        }
    }

    pub fn set_mode(&mut self, mode: &str) -> Result<()> {
        let (attention, residual) = match mode {
            "soft-atten" => (AttentionSource::Soft, false),
            "soft-res" => (AttentionSource::Soft, true),
            "prob-atten" => (AttentionSource::Prob, false),
            "prob-res" => (AttentionSource::Prob, true),
            _ => return Err(Error::Config(format!("unknown attention mode `{mode}`"))),
        };
        self.attention = attention;
        self.residual = residual;
        Ok(())
    }

    pub fn is_known_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Set one `key = value` entry. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.set_mode(value)?,
            "role" => self.role = value.parse()?,
            "classes" => self.classes = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr.initial = parse_num(key, value)?,
            "lr_decay" => self.lr.decay = parse_num(key, value)?,
            "lr_patience" => self.lr.patience = parse_num(key, value)?,
            "lr_threshold" => self.lr.threshold = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "lambda1" => self.lambda1 = parse_lambda(key, value)?,
            "lambda2" => self.lambda2 = parse_lambda(key, value)?,
            "lambda_fm" => self.lambda_fm = parse_lambda(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "literal_eq4" => self.literal_eq4 = parse_bool(key, value)?,
            "sampled_target" => self.sampled_target = parse_bool(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| parse_num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "attn_channels" => self.attn_channels = parse_num(key, value)?,
            "batch_norm" => self.batch_norm = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment. Starts from `base`.
    pub fn parse_onto(mut self, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().parse_onto(text)
    }

    /// Canonical text; `parse(canonical())` reproduces the config.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode().into());
        kv("role", self.role.name().into());
        kv("classes", self.classes.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr.initial));
        kv("lr_decay", format!("{:?}", self.lr.decay));
        kv("lr_patience", self.lr.patience.to_string());
        kv("lr_threshold", format!("{:?}", self.lr.threshold));
        kv("momentum", format!("{:?}", self.momentum));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("dropout", format!("{:?}", self.dropout));
        kv("temperature", format!("{:?}", self.temperature));
        kv("lambda1", show_lambda(self.lambda1));
        kv("lambda2", show_lambda(self.lambda2));
        kv("lambda_fm", show_lambda(self.lambda_fm));
        kv("seed", self.seed.to_string());
        kv("literal_eq4", self.literal_eq4.to_string());
        kv("sampled_target", self.sampled_target.to_string());
        kv("flip", self.flip.to_string());
        kv(
            "widths",
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("attn_channels", self.attn_channels.to_string());
        kv("batch_norm", self.batch_norm.to_string());
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Reject invalid combinations before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.attention == AttentionSource::Prob && self.residual {
            return bad("the prob-atten + residual combination is invalid".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.initial > 0.0) || !(self.lr.decay > 1.0) || self.lr.patience == 0 {
            return bad("lr schedule needs lr > 0, lr_decay > 1, lr_patience >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_fm", self.lambda_fm),
        ] {
            if let Some(x) = v {
                if !(x >= 0.0) || !x.is_finite() {
                    return bad(format!("{name} must be a finite nonnegative number"));
                }
            }
        }
        let nonzero = |v: Option<f64>| v.is_some_and(|x| x != 0.0);
        match self.role {
            ModelRole::TeacherFlow => {
                if nonzero(self.lambda1) || nonzero(self.lambda_fm) || self.sampled_target {
                    return bad("the teacher-flow role takes no distillation losses".into());
                }
            }
            ModelRole::StudentBaseline | ModelRole::StudentOracleAttn => {
                if nonzero(self.lambda1) || nonzero(self.lambda_fm) {
                    return bad(format!("role {} takes no lambda1/lambda_fm term", self.role));
                }
            }
            ModelRole::StudentDistill => {
                if nonzero(self.lambda_fm) {
                    return bad("lambda_fm applies only to the featmatch role".into());
                }
            }
            ModelRole::StudentFeatMatch => {
                if nonzero(self.lambda1) {
                    return bad("lambda1 does not apply to the featmatch role".into());
                }
            }
        }
        if self.widths.len() < 2 || self.widths.contains(&0) || self.attn_channels == 0 {
            return bad("widths needs at least two positive entries".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trips() {
        let mut c = RunConfig::teacher();
        c.set_mode("soft-res").unwrap();
        c.lambda2 = Some(0.125);
        c.widths = vec![4, 8];
        c.temperature = 0.3;
        let back = RunConfig::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn rejects_prob_res_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.set_mode("prob-res").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("invalid")));
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("epochs 3").is_err());
    }

    #[test]
    fn rejects_role_loss_mismatch() {
        let mut c = RunConfig::teacher();
        c.lambda1 = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = RunConfig::student(ModelRole::StudentBaseline);
        c.lambda_fm = Some(1.0);
        assert!(c.validate().is_err());
        c.lambda_fm = Some(0.0);
        c.validate().unwrap();
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nepochs = 3 # short\nmode = soft-atten\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.mode(), "soft-atten");
    }

    #[test]
    fn plateau_divides_once_per_plateau() {
        let mut p = Plateau::new(LrSchedule::default());
        let mut lrs = Vec::new();
        for loss in [2.0, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5] {
            lrs.push(p.observe(loss));
        }
        assert_eq!(
            lrs,
            vec![0.01, 0.01, 0.01, 0.01, 0.01, 0.001, 0.001, 0.001, 0.0001, 0.0001]
        );
        let mut p = Plateau::new(LrSchedule::default());
        assert_eq!(p.observe(1.0), 0.01);
        // three epochs whose cumulative relative gain stays below 1e-3
        assert_eq!(p.observe(0.9998), 0.01);
        assert_eq!(p.observe(0.9996), 0.01);
        assert!((p.observe(0.9994) - 0.001).abs() < 1e-15);
        let mut p = Plateau::new(LrSchedule::default());
        p.observe(1.0);
        p.observe(0.9995);
        p.observe(0.9990);
        // 1.5e-3 below the best resets the window
        assert_eq!(p.observe(0.9985), 0.01);
    }
}
