//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Any key can be overridden from
//! the environment as `CERLAB_<KEY>` (upper case). Unknown keys and bad
//! values are all reported together.

use std::collections::BTreeMap;
use std::path::Path;

use crate::env::MazeKind;
use crate::error::{Error, Result};
use crate::trainer::{CerMode, RunConfig};

pub const ENV_PREFIX: &str = "CERLAB_";

pub const KEYS: &[&str] = &[
    "env",
    "cer",
    "her",
    "episodes_per_epoch",
    "epochs",
    "updates_per_episode",
    "batch_size",
    "workers_a",
    "workers_b",
    "reset_epochs",
    "max_reset_epochs",
    "eval_episodes",
    "seed",
    "buffer_size",
    "p_future",
    "hidden",
    "gamma",
    "polyak",
    "actor_lr",
    "critic_lr",
    "action_l2",
    "noise_std",
    "random_action_prob",
    "log_batches_every",
    "joint_sampling",
];

/// Splits `key = value` lines. Later duplicates win.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut problems = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                out.insert(k.trim().to_string(), v.trim().to_string());
            }
            _ => problems.push(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(problems.join("\n")))
    }
}

fn nearest_key(unknown: &str) -> &'static str {
    KEYS.iter()
        .copied()
        .min_by_key(|k| strsim::levenshtein(unknown, k))
        .expect("non-empty key list")
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(format!("`{other}` is not on/off")),
    }
}

/// Builds a run configuration from parsed pairs on top of the per-maze
/// defaults.
pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<RunConfig> {
    let mut problems = Vec::new();
    for key in pairs.keys() {
        if !KEYS.contains(&key.as_str()) {
            problems.push(format!(
                "unknown key `{key}` (did you mean `{}`?)",
                nearest_key(key)
            ));
        }
    }
    let maze = match pairs.get("env") {
        Some(v) => v.parse::<MazeKind>().unwrap_or_else(|e| {
            problems.push(format!("env: {e}"));
            MazeKind::U
        }),
        None => MazeKind::U,
    };
    let mut cfg = RunConfig::for_maze(maze);

    macro_rules! set {
        ($key:literal, $field:expr, $parse:expr) => {
            if let Some(v) = pairs.get($key) {
                match $parse(v.as_str()) {
                    Ok(x) => $field = x,
                    Err(e) => problems.push(format!("{}: {}", $key, e)),
                }
            }
        };
    }
    let uint = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let real = |v: &str| v.parse::<f64>().map_err(|e| format!("`{v}`: {e}"));

    set!("cer", cfg.cer, |v: &str| v.parse::<CerMode>().map_err(|e| e.to_string()));
    set!("her", cfg.her, parse_bool);
    set!("episodes_per_epoch", cfg.episodes_per_epoch, uint);
    set!("epochs", cfg.epochs, uint);
    set!("updates_per_episode", cfg.updates_per_episode, uint);
    set!("batch_size", cfg.batch_size, uint);
    set!("workers_a", cfg.workers_a, uint);
    set!("workers_b", cfg.workers_b, uint);
    set!("reset_epochs", cfg.reset_epochs, uint);
    set!("max_reset_epochs", cfg.max_reset_epochs, uint);
    set!("eval_episodes", cfg.eval_episodes, uint);
    set!("seed", cfg.seed, |v: &str| v.parse::<u64>().map_err(|e| format!("`{v}`: {e}")));
    set!("buffer_size", cfg.buffer_size, |v: &str| {
        // accept 1e5-style values from the hyperparameter table
        v.parse::<usize>().or_else(|_| {
            v.parse::<f64>()
                .ok()
                .filter(|x| *x >= 0.0 && x.fract() == 0.0)
                .map(|x| x as usize)
                .ok_or_else(|| format!("`{v}` is not a whole number"))
        })
    });
    set!("p_future", cfg.p_future, real);
    set!("hidden", cfg.hidden, |v: &str| {
        v.split(',')
            .map(|d| d.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
    });
    set!("gamma", cfg.gamma, |v: &str| {
        if v == "auto" {
            Ok(None)
        } else {
            real(v).map(Some)
        }
    });
    set!("polyak", cfg.train.polyak, real);
    set!("actor_lr", cfg.train.actor_lr, real);
    set!("critic_lr", cfg.train.critic_lr, real);
    set!("action_l2", cfg.train.action_l2, real);
    set!("noise_std", cfg.train.noise_std, real);
    set!("random_action_prob", cfg.train.random_action_prob, real);
    set!("log_batches_every", cfg.log_batches_every, uint);
    set!("joint_sampling", cfg.joint_sampling, parse_bool);

    if problems.is_empty() {
        if let Err(Error::Config(msg)) = cfg.validate() {
            problems.push(msg);
        }
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems.join("\n")))
    }
}

/// Applies `CERLAB_<KEY>` overrides taken from `vars`.
pub fn apply_env_overrides<I>(pairs: &mut BTreeMap<String, String>, vars: I)
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, value) in vars {
        if let Some(key) = name.strip_prefix(ENV_PREFIX) {
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                pairs.insert(key, value);
            }
        }
    }
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    from_pairs(&parse_pairs(text)?)
}

/// Reads a config file and applies process environment overrides.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut pairs = parse_pairs(&text)?;
    apply_env_overrides(&mut pairs, std::env::vars());
    from_pairs(&pairs)
}

/// Every key with its resolved value, in `KEYS` order. Parsing the result
/// reproduces `cfg` exactly.
pub fn to_text(cfg: &RunConfig) -> String {
    let hidden: Vec<String> = cfg.hidden.iter().map(usize::to_string).collect();
    let t = &cfg.train;
    let values: Vec<(&str, String)> = vec![
        ("env", cfg.maze.name().to_string()),
        ("cer", cfg.cer.name().to_string()),
        ("her", if cfg.her { "on" } else { "off" }.to_string()),
        ("episodes_per_epoch", cfg.episodes_per_epoch.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("updates_per_episode", cfg.updates_per_episode.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("workers_a", cfg.workers_a.to_string()),
        ("workers_b", cfg.workers_b.to_string()),
        ("reset_epochs", cfg.reset_epochs.to_string()),
        ("max_reset_epochs", cfg.max_reset_epochs.to_string()),
        ("eval_episodes", cfg.eval_episodes.to_string()),
        ("seed", cfg.seed.to_string()),
        ("buffer_size", cfg.buffer_size.to_string()),
        ("p_future", format!("{:?}", cfg.p_future)),
        ("hidden", hidden.join(",")),
        ("gamma", cfg.gamma.map_or("auto".to_string(), |g| format!("{g:?}"))),
        ("polyak", format!("{:?}", t.polyak)),
        ("actor_lr", format!("{:?}", t.actor_lr)),
        ("critic_lr", format!("{:?}", t.critic_lr)),
        ("action_l2", format!("{:?}", t.action_l2)),
        ("noise_std", format!("{:?}", t.noise_std)),
        ("random_action_prob", format!("{:?}", t.random_action_prob)),
        ("log_batches_every", cfg.log_batches_every.to_string()),
        ("joint_sampling", if cfg.joint_sampling { "on" } else { "off" }.to_string()),
    ];
    values
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_u_maze_table() {
        let cfg = parse_str("").unwrap();
        assert_eq!(cfg.maze, MazeKind::U);
        assert_eq!(cfg.buffer_size, 100_000);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.horizon(), 50);
        assert_eq!(cfg.train.actor_lr, 0.0004);
        assert_eq!(cfg.train.critic_lr, 0.0004);
        assert_eq!(cfg.train.action_l2, 0.01);
        assert_eq!(cfg.train.polyak, 0.95);
        assert_eq!((cfg.reset_epochs, cfg.max_reset_epochs, cfg.epochs), (2, 10, 50));
        assert!((cfg.resolved_train().gamma - 0.98).abs() < 1e-15);
        let s = parse_str("env = S").unwrap();
        assert_eq!((s.buffer_size, s.epochs, s.horizon()), (1_000_000, 100, 100));
    }

    #[test]
    fn unknown_key_names_nearest() {
        let err = parse_str("polyakk = 0.9\nbatch_sise = 3\n").unwrap_err().to_string();
        assert!(err.contains("unknown key `polyakk` (did you mean `polyak`?)"), "{err}");
        assert!(err.contains("`batch_sise` (did you mean `batch_size`?)"), "{err}");
    }

    #[test]
    fn bad_values_are_all_listed() {
        let err = parse_str("cer = maybe\nepochs = -3\nher = perhaps")
            .unwrap_err()
            .to_string();
        assert!(err.contains("cer:") && err.contains("epochs:") && err.contains("her:"));
    }

    #[test]
    fn malformed_line() {
        assert!(parse_str("just words").is_err());
    }

    #[test]
    fn comments_and_scientific_buffer() {
        let cfg = parse_str("# U maze\nbuffer_size = 1E5 # table value\ncer = ind\nher = off\n")
            .unwrap();
        assert_eq!(cfg.buffer_size, 100_000);
        assert_eq!(cfg.cer, CerMode::Independent);
        assert!(!cfg.her);
    }

    #[test]
    fn env_overrides_win() {
        let mut pairs = parse_pairs("seed = 1\nepochs = 3").unwrap();
        apply_env_overrides(
            &mut pairs,
            vec![
                ("CERLAB_SEED".to_string(), "9".to_string()),
                ("HOME".to_string(), "/x".to_string()),
            ],
        );
        let cfg = from_pairs(&pairs).unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (9, 3));
    }

    #[test]
    fn text_round_trip() {
        let cfg = parse_str("env = S\ncer = int\nhidden = 32,32\ngamma = 0.9\nseed = 4\n").unwrap();
        let text = to_text(&cfg);
        assert_eq!(parse_str(&text).unwrap(), cfg);
    }
}
