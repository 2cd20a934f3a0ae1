//! Deterministic gridworld simulators.
//!
//! A square of adjacent bright cells moves around a dark grid. The basic
//! variant exposes 4 movement actions; the extended variant has 8 actions
//! including a duplicated "down", a diagonal move, and brightness changes.
//! Transitions are pure functions: blocked moves clamp at the walls.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Which of the two gridworlds to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Basic,
    Extended,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Extended => "extended",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "extended" => Ok(Variant::Extended),
            other => Err(Error::Config(format!(
                "unknown env variant `{other}` (expected basic|extended)"
            ))),
        }
    }
}

/// Ordered action labels for the basic variant.
pub const BASIC_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

/// Ordered action labels for the extended variant. The first two actions
/// are deliberately redundant: both move down.
pub const EXTENDED_ACTIONS: [&str; 8] = [
    "down",
    "down_dup",
    "up",
    "left",
    "right",
    "down_right",
    "color_inc",
    "color_dec",
];

/// Environment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub variant: Variant,
    pub grid_height: usize,
    pub grid_width: usize,
    pub square_size: usize,
    /// Brightness ladder step (extended variant only).
    pub color_step: f64,
    pub color_min: f64,
    pub color_max: f64,
    /// Seed for the environment's state-sampling stream.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            variant: Variant::Basic,
            grid_height: 10,
            grid_width: 10,
            square_size: 2,
            color_step: 0.125,
            color_min: 0.25,
            color_max: 1.0,
            seed: 7,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_height == 0 || self.grid_width == 0 || self.square_size == 0 {
            return Err(Error::InvalidEnvConfig(
                "grid extents and square size must be positive".into(),
            ));
        }
        if self.square_size > self.grid_height.min(self.grid_width) {
            return Err(Error::InvalidEnvConfig(format!(
                "square_size {} exceeds min grid extent {}",
                self.square_size,
                self.grid_height.min(self.grid_width)
            )));
        }
        if !(0.0 <= self.color_min && self.color_min < self.color_max && self.color_max <= 1.0) {
            return Err(Error::InvalidEnvConfig(format!(
                "need 0 <= color_min < color_max <= 1, got [{}, {}]",
                self.color_min, self.color_max
            )));
        }
        if self.color_step <= 0.0 {
            return Err(Error::InvalidEnvConfig("color_step must be positive".into()));
        }
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        match self.variant {
            Variant::Basic => BASIC_ACTIONS.len(),
            Variant::Extended => EXTENDED_ACTIONS.len(),
        }
    }

    pub fn action_labels(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::Basic => &BASIC_ACTIONS,
            Variant::Extended => &EXTENDED_ACTIONS,
        }
    }

    /// Labels of the ground-truth factors exposed to evaluation.
    pub fn factor_labels(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::Basic => &["row", "col"],
            Variant::Extended => &["row", "col", "color"],
        }
    }

    pub fn max_row(&self) -> usize {
        self.grid_height - self.square_size
    }

    pub fn max_col(&self) -> usize {
        self.grid_width - self.square_size
    }

    /// Discrete brightness values the extended variant samples from.
    pub fn color_ladder(&self) -> Vec<f64> {
        let n = ((self.color_max - self.color_min) / self.color_step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.color_min + i as f64 * self.color_step).collect()
    }
}

/// Ground-truth environment state plus its rendered observation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState<T> {
    pub row: usize,
    pub col: usize,
    pub color: T,
    /// `[1, H, W]` image: zeros except the square's cells, which hold `color`.
    pub observation: Tensor<T>,
}

fn render<T: Scalar>(cfg: &EnvConfig, row: usize, col: usize, color: T) -> Tensor<T> {
    let (h, w) = (cfg.grid_height, cfg.grid_width);
    let mut obs = Tensor::zeros(vec![1, h, w]);
    for dy in 0..cfg.square_size {
        for dx in 0..cfg.square_size {
            obs.data_mut()[(row + dy) * w + (col + dx)] = color;
        }
    }
    obs
}

fn make_state<T: Scalar>(cfg: &EnvConfig, row: usize, col: usize, color: T) -> GridState<T> {
    GridState {
        row,
        col,
        color,
        observation: render(cfg, row, col, color),
    }
}

/// Sample a uniformly random state: position uniform over the valid cells,
/// color uniform over the brightness ladder (extended) or fixed at 1
/// (basic).
pub fn reset<T: Scalar, R: Rng>(cfg: &EnvConfig, rng: &mut R) -> Result<GridState<T>> {
    cfg.validate()?;
    let row = rng.gen_range(0..=cfg.max_row());
    let col = rng.gen_range(0..=cfg.max_col());
    let color = match cfg.variant {
        Variant::Basic => T::one(),
        Variant::Extended => {
            let ladder = cfg.color_ladder();
            T::from_f64(ladder[rng.gen_range(0..ladder.len())])
        }
    };
    Ok(make_state(cfg, row, col, color))
}

/// Deterministic transition. Movement clamps at the walls (a blocked move
/// leaves the position unchanged); color changes clamp to the configured
/// range. The input state is untouched.
pub fn step<T: Scalar>(cfg: &EnvConfig, state: &GridState<T>, action: usize) -> Result<GridState<T>> {
    let count = cfg.action_count();
    if action >= count {
        return Err(Error::ActionOutOfRange {
            index: action,
            count,
            variant: cfg.variant.as_str().into(),
        });
    }
    let (mut row, mut col, mut color) = (state.row, state.col, state.color);
    let mut shift = |dr: isize, dc: isize| {
        row = clamp_shift(row, dr, cfg.max_row());
        col = clamp_shift(col, dc, cfg.max_col());
    };
    match (cfg.variant, action) {
        (Variant::Basic, 0) => shift(-1, 0),
        (Variant::Basic, 1) => shift(1, 0),
        (Variant::Basic, 2) => shift(0, -1),
        (Variant::Basic, 3) => shift(0, 1),
        // actions 0 and 1 share one transition: both move down
        (Variant::Extended, 0) | (Variant::Extended, 1) => shift(1, 0),
        (Variant::Extended, 2) => shift(-1, 0),
        (Variant::Extended, 3) => shift(0, -1),
        (Variant::Extended, 4) => shift(0, 1),
        (Variant::Extended, 5) => shift(1, 1),
        (Variant::Extended, 6) => {
            color = clamp_color(color + T::from_f64(cfg.color_step), cfg);
        }
        (Variant::Extended, 7) => {
            color = clamp_color(color - T::from_f64(cfg.color_step), cfg);
        }
        _ => unreachable!("action index validated above"),
    }
    Ok(make_state(cfg, row, col, color))
}

fn clamp_shift(v: usize, delta: isize, max: usize) -> usize {
    let shifted = v as isize + delta;
    shifted.clamp(0, max as isize) as usize
}

fn clamp_color<T: Scalar>(c: T, cfg: &EnvConfig) -> T {
    c.max(T::from_f64(cfg.color_min)).min(T::from_f64(cfg.color_max))
}

/// The true factors behind an observation: `(row, col)` for the basic
/// variant, `(row, col, color)` for the extended one. Evaluation-only; the
/// learner never sees these.
pub fn ground_truth_factors<T: Scalar>(cfg: &EnvConfig, state: &GridState<T>) -> Vec<T> {
    let mut f = vec![
        T::from_f64(state.row as f64),
        T::from_f64(state.col as f64),
    ];
    if cfg.variant == Variant::Extended {
        f.push(state.color);
    }
    f
}

impl<T: Scalar> GridState<T> {
    /// Flat CSV row `variant,row,col,color` for replay logs.
    pub fn csv_row(&self, cfg: &EnvConfig) -> String {
        format!(
            "{},{},{},{}",
            cfg.variant.as_str(),
            self.row,
            self.col,
            self.color.as_f64()
        )
    }

    /// Parse a row produced by [`GridState::csv_row`] and re-render it.
    pub fn from_csv_row(cfg: &EnvConfig, line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "state row needs 4 fields, got {}",
                fields.len()
            )));
        }
        let variant = Variant::parse(fields[0])?;
        if variant != cfg.variant {
            return Err(Error::Config(format!(
                "state row variant {} does not match config {}",
                variant.as_str(),
                cfg.variant.as_str()
            )));
        }
        let row: usize = fields[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad row `{}`", fields[1])))?;
        let col: usize = fields[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad col `{}`", fields[2])))?;
        let color: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Config(format!("bad color `{}`", fields[3])))?;
        if row > cfg.max_row() || col > cfg.max_col() {
            return Err(Error::Config(format!("position ({row},{col}) out of range")));
        }
        Ok(make_state(cfg, row, col, T::from_f64(color)))
    }
}
