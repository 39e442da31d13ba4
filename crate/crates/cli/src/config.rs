//! Flat `section.key = value` settings with `#` comments.
//!
//! Every key has a default. A config file and then `--set key=value` flags
//! are layered on top; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use ssnn::data::{Format, Observation, PendulumConfig, Torque};
use ssnn::eval::EvalOptions;
use ssnn::generative::GenDims;
use ssnn::training::TrainConfig;

use crate::CliError;

/// Value spelled for "absent" in optional keys.
const NONE: &str = "none";
const RANDOM: &str = "random";

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn put(map: &mut BTreeMap<String, String>, key: &str, value: impl Display) {
    map.insert(key.to_string(), value.to_string());
}

fn opt<T: Display>(v: Option<T>, absent: &str) -> String {
    v.map_or(absent.to_string(), |v| v.to_string())
}

impl Default for Settings {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        let t = TrainConfig::with_dims(3, 10, 4, 16, 8);
        put(&mut m, "train.batch_size", t.batch_size);
        put(&mut m, "train.iterations", t.iterations);
        put(&mut m, "train.learning_rate", t.learning_rate);
        put(&mut m, "train.theta_learning_rate", opt(t.theta_learning_rate, NONE));
        put(&mut m, "train.beta1", t.beta1);
        put(&mut m, "train.beta2", t.beta2);
        put(&mut m, "train.epsilon", t.epsilon);
        put(&mut m, "train.tau_start", t.tau_start);
        put(&mut m, "train.tau_end", t.tau_end);
        put(&mut m, "train.mode", t.mode);
        put(&mut m, "train.clip_norm", t.clip_norm);
        put(&mut m, "train.bptt_chunk", opt(t.bptt_chunk, NONE));
        put(&mut m, "train.samples", t.samples);
        put(&mut m, "train.checkpoint_every", t.checkpoint_every);
        put(&mut m, "train.record_time", t.record_time);
        put(&mut m, "train.no_self_transition", t.no_self_transition);
        put(&mut m, "train.warmup", t.warmup);
        put(&mut m, "train.emission_init", t.emission_init);
        put(&mut m, "train.states", t.states);
        put(&mut m, "train.max_dur", t.max_dur);
        put(&mut m, "train.hidden", t.hidden);
        put(&mut m, "train.encoder", t.encoder);
        put(&mut m, "train.summary", t.summary);

        let p = PendulumConfig::default();
        put(&mut m, "pendulum.mass", p.mass);
        put(&mut m, "pendulum.length", p.length);
        put(&mut m, "pendulum.damping", p.damping);
        put(&mut m, "pendulum.gravity", p.gravity);
        let (torque, interval, max) = match p.torque {
            Torque::Zero => ("zero", 0.5, 2.0),
            Torque::Piecewise { interval, max } => ("piecewise", interval, max),
        };
        put(&mut m, "pendulum.torque", torque);
        put(&mut m, "pendulum.torque_interval", interval);
        put(&mut m, "pendulum.torque_max", max);
        put(&mut m, "pendulum.dt", p.dt);
        put(&mut m, "pendulum.duration", p.duration);
        put(&mut m, "pendulum.obs_interval", p.obs_interval);
        let (obs, side) = match p.observation {
            Observation::Trig => ("trig", 16),
            Observation::Image { side } => ("image", side),
        };
        put(&mut m, "pendulum.observation", obs);
        put(&mut m, "pendulum.image_side", side);
        put(&mut m, "pendulum.noise_std", p.noise_std);
        put(&mut m, "pendulum.phi0", opt(p.phi0, RANDOM));
        put(&mut m, "pendulum.omega0", opt(p.omega0, RANDOM));

        put(&mut m, "ssnn.states", 3);
        put(&mut m, "ssnn.max_dur", 10);
        put(&mut m, "ssnn.obs_dim", 2);
        put(&mut m, "ssnn.hidden", 4);
        put(&mut m, "ssnn.separation", 4.0);
        put(&mut m, "ssnn.steps", 200);

        put(&mut m, "data.count", 50);
        put(&mut m, "data.format", "csv");

        let e = EvalOptions::default();
        put(&mut m, "eval.elbo_samples", e.elbo_samples);
        put(&mut m, "eval.tau", e.tau);
        put(&mut m, "eval.mode", e.mode);
        Settings { values: m }
    }
}

impl Settings {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    fn unknown(&self, key: &str) -> CliError {
        let valid: Vec<&str> = self.keys().collect();
        CliError::Usage(format!("unknown key {key:?}; valid keys: {}", valid.join(", ")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(self.unknown(key)),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, arg: &str) -> Result<(), CliError> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {arg:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config file's text; `origin` names it in messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected `section.key = value`", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("bad value {raw:?} for {key}: {e}")))
    }

    fn get_opt<T: FromStr>(&self, key: &str, absent: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        if self.raw(key) == absent {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let mut t = TrainConfig::with_dims(
            self.get("train.states")?,
            self.get("train.max_dur")?,
            self.get("train.hidden")?,
            self.get("train.encoder")?,
            self.get("train.summary")?,
        );
        t.batch_size = self.get("train.batch_size")?;
        t.iterations = self.get("train.iterations")?;
        t.learning_rate = self.get("train.learning_rate")?;
        t.theta_learning_rate = self.get_opt("train.theta_learning_rate", NONE)?;
        t.beta1 = self.get("train.beta1")?;
        t.beta2 = self.get("train.beta2")?;
        t.epsilon = self.get("train.epsilon")?;
        t.tau_start = self.get("train.tau_start")?;
        t.tau_end = self.get("train.tau_end")?;
        t.mode = self.get("train.mode")?;
        t.clip_norm = self.get("train.clip_norm")?;
        t.bptt_chunk = self.get_opt("train.bptt_chunk", NONE)?;
        t.samples = self.get("train.samples")?;
        t.checkpoint_every = self.get("train.checkpoint_every")?;
        t.record_time = self.get("train.record_time")?;
        t.no_self_transition = self.get("train.no_self_transition")?;
        t.warmup = self.get("train.warmup")?;
        t.emission_init = self.get("train.emission_init")?;
        t.seed = seed;
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }

    pub fn pendulum_config(&self) -> Result<PendulumConfig, CliError> {
        let torque = match self.raw("pendulum.torque") {
            "zero" => Torque::Zero,
            "piecewise" => Torque::Piecewise {
                interval: self.get("pendulum.torque_interval")?,
                max: self.get("pendulum.torque_max")?,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "bad value {other:?} for pendulum.torque (expected zero or piecewise)"
                )))
            }
        };
        let observation = match self.raw("pendulum.observation") {
            "trig" => Observation::Trig,
            "image" => Observation::Image {
                side: self.get("pendulum.image_side")?,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "bad value {other:?} for pendulum.observation (expected trig or image)"
                )))
            }
        };
        let p = PendulumConfig {
            mass: self.get("pendulum.mass")?,
            length: self.get("pendulum.length")?,
            damping: self.get("pendulum.damping")?,
            gravity: self.get("pendulum.gravity")?,
            torque,
            dt: self.get("pendulum.dt")?,
            duration: self.get("pendulum.duration")?,
            obs_interval: self.get("pendulum.obs_interval")?,
            observation,
            noise_std: self.get("pendulum.noise_std")?,
            phi0: self.get_opt("pendulum.phi0", RANDOM)?,
            omega0: self.get_opt("pendulum.omega0", RANDOM)?,
        };
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }

    pub fn ssnn_dims(&self) -> Result<GenDims, CliError> {
        let dims = GenDims {
            states: self.get("ssnn.states")?,
            max_dur: self.get("ssnn.max_dur")?,
            obs_dim: self.get("ssnn.obs_dim")?,
            hidden: self.get("ssnn.hidden")?,
        };
        if dims.states == 0 || dims.max_dur == 0 || dims.obs_dim == 0 || dims.hidden == 0 {
            return Err(CliError::Usage("ssnn dims must be >= 1".into()));
        }
        Ok(dims)
    }

    pub fn format(&self) -> Result<Format, CliError> {
        self.get("data.format")
    }

    pub fn eval_options(&self, seed: u64) -> Result<EvalOptions, CliError> {
        let o = EvalOptions {
            elbo_samples: self.get("eval.elbo_samples")?,
            tau: self.get("eval.tau")?,
            mode: self.get("eval.mode")?,
            seed,
            require_truth: false,
        };
        if !(o.tau > 0.0) || o.elbo_samples == 0 {
            return Err(CliError::Usage("eval.tau must be > 0 and eval.elbo_samples >= 1".into()));
        }
        Ok(o)
    }
}
