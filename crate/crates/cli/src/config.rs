//! `key = value` configuration for `synth`, `train` and `project`.

use flint_core::embed::{EncoderConfig, EncoderTrainConfig, Variant};
use flint_core::fieldio::{Motion, SynthConfig};
use flint_core::flint::FlintConfig;
use flint_core::hyper::HyperConfig;
use flint_core::trainer::{parse_kv, ModelSpec, TrainConfig};
use indexmap::IndexMap;

use crate::CliError;

pub type Kv = IndexMap<String, String>;

pub fn load(path: Option<&std::path::Path>) -> Result<Kv, CliError> {
    match path {
        None => Ok(Kv::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_kv(&text).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| CliError::Usage(format!("config `{k}`: cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(k: &str, v: &str, sep: char) -> Result<Vec<T>, CliError> {
    v.split(sep).filter(|s| !s.trim().is_empty()).map(|s| num(k, s)).collect()
}

fn unknown(k: &str, section: &str) -> CliError {
    CliError::Usage(format!("unknown {section} config key `{k}`"))
}

/// Motions as `t:vx,vy[,vz]` or `r:omega`, separated by `;`.
pub fn parse_motions(v: &str) -> Result<Vec<Motion>, CliError> {
    v.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|m| match m.trim().split_once(':') {
            Some(("t", rest)) => Ok(Motion::Translation(list("motions", rest, ',')?)),
            Some(("r", rest)) => Ok(Motion::Rotation(num("motions", rest)?)),
            _ => Err(CliError::Usage(format!("motion `{m}`: expected t:vx,vy or r:omega"))),
        })
        .collect()
}

pub fn synth_config(kv: &Kv) -> Result<SynthConfig, CliError> {
    let mut c = SynthConfig::default();
    for (k, v) in kv {
        match k.as_str() {
            "dims" => c.dims = list(k, v, 'x')?,
            "n_timesteps" => c.n_timesteps = num(k, v)?,
            "n_blobs" => c.n_blobs = num(k, v)?,
            "sigma_min" => c.sigma_range.0 = num(k, v)?,
            "sigma_max" => c.sigma_range.1 = num(k, v)?,
            "noise_sigma" => c.noise_sigma = num(k, v)?,
            "shared_layout" => c.shared_layout = num(k, v)?,
            "motions" => c.motions = parse_motions(v)?,
            "seed" => c.seed = num(k, v)?,
            _ => return Err(unknown(k, "synth")),
        }
    }
    Ok(c)
}

const MODEL_KEYS: &[&str] = &[
    "model",
    "n_blocks",
    "channels",
    "teacher_channels",
    "divisor",
    "hidden",
    "conv_channels",
    "conv_len",
    "conv_out",
    "dropout",
];

/// Splits a train config into model and trainer settings.
pub fn train_config(kv: &Kv, rank: usize, param_dim: usize) -> Result<(ModelSpec, TrainConfig), CliError> {
    let mut tc = TrainConfig::default();
    let mut model = Kv::new();
    for (k, v) in kv {
        if MODEL_KEYS.contains(&k.as_str()) {
            model.insert(k.clone(), v.clone());
        } else if !tc.apply(k, v).map_err(|e| CliError::Usage(e.to_string()))? {
            return Err(unknown(k, "train"));
        }
    }
    let divisor: usize = model.get("divisor").map(|v| num("divisor", v)).transpose()?.unwrap_or(8);
    let kind = model.get("model").map(String::as_str).unwrap_or("flint");
    let spec = match kind {
        "flint" => {
            let mut f = FlintConfig::desk(rank);
            f.desk_scale = (divisor > 1).then_some(divisor);
            if let Some(v) = model.get("channels") {
                f.channels = list("channels", v, ',')?;
                f.n_blocks = f.channels.len();
            }
            if let Some(v) = model.get("n_blocks") {
                f.n_blocks = num("n_blocks", v)?;
            }
            if let Some(v) = model.get("teacher_channels") {
                f.teacher_channels = if v == "none" { None } else { Some(num("teacher_channels", v)?) };
            }
            for k in ["hidden", "conv_channels", "conv_len", "conv_out", "dropout"] {
                if model.contains_key(k) {
                    return Err(CliError::Usage(format!("`{k}` applies only to model = hyper")));
                }
            }
            ModelSpec::Flint(f)
        }
        "hyper" => {
            let mut h = HyperConfig::new(param_dim, rank, divisor);
            if let Some(v) = model.get("channels") {
                h.flint.channels = list("channels", v, ',')?;
                h.flint.n_blocks = h.flint.channels.len();
            }
            if let Some(v) = model.get("hidden") {
                let w: Vec<usize> = list("hidden", v, ',')?;
                h.hidden = w.try_into().map_err(|_| CliError::Usage("`hidden` needs two widths".into()))?;
            }
            if let Some(v) = model.get("conv_channels") {
                h.conv_channels = num("conv_channels", v)?;
            }
            if let Some(v) = model.get("conv_len") {
                h.conv_len = num("conv_len", v)?;
            }
            if let Some(v) = model.get("conv_out") {
                h.conv_out = num("conv_out", v)?;
            }
            if let Some(v) = model.get("dropout") {
                h.dropout = num("dropout", v)?;
            }
            if model.contains_key("teacher_channels") || model.contains_key("n_blocks") {
                return Err(CliError::Usage("FLINT* takes its depth from `channels` and has no teacher".into()));
            }
            if !kv.contains_key("mode") {
                tc.mode = flint_core::trainer::TrainMode::Hyper;
            }
            ModelSpec::Hyper(h)
        }
        other => return Err(CliError::Usage(format!("unknown model `{other}` (flint, hyper)"))),
    };
    Ok((spec, tc))
}

/// Encoder shape and training settings for `project`.
pub fn encoder_config(kv: &Kv, input_dim: usize, backend: &str) -> Result<(EncoderConfig, EncoderTrainConfig), CliError> {
    let mut latent = 2usize;
    let mut depth = 2usize;
    let mut l1 = flint_core::embed::SPARSE_L1_DEFAULT;
    let mut l2 = flint_core::embed::SPARSE_L2_DEFAULT;
    let mut beta = 1.0;
    let mut t = EncoderTrainConfig::default();
    for (k, v) in kv {
        match k.as_str() {
            "latent_dim" => latent = num(k, v)?,
            "depth" => depth = num(k, v)?,
            "lambda_l1" => l1 = num(k, v)?,
            "lambda_l2" => l2 = num(k, v)?,
            "beta" => beta = num(k, v)?,
            "epochs" => t.epochs = num(k, v)?,
            "batch_size" => t.batch_size = num(k, v)?,
            "lr" => t.lr = num(k, v)?,
            "weight_decay" => t.weight_decay = num(k, v)?,
            "seed" => t.seed = num(k, v)?,
            _ => return Err(unknown(k, "encoder")),
        }
    }
    let variant = match backend {
        "ae" => Variant::Plain,
        "sparse" => Variant::Sparse { l1, l2 },
        "vae" => Variant::BetaVae { beta },
        other => return Err(CliError::Usage(format!("unknown encoder backend `{other}`"))),
    };
    Ok((EncoderConfig::halving(input_dim, latent, depth, variant), t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(text: &str) -> Kv {
        parse_kv(text).unwrap()
    }

    #[test]
    fn synth_keys() {
        let c = synth_config(&kv("dims = 16x24\nmotions = t:0.5,0.25; r:0.02\nshared_layout = true")).unwrap();
        assert_eq!(c.dims, vec![16, 24]);
        assert_eq!(c.motions, vec![Motion::Translation(vec![0.5, 0.25]), Motion::Rotation(0.02)]);
        assert!(c.shared_layout);
        assert!(synth_config(&kv("bogus = 1")).is_err());
        assert!(parse_motions("x:1").is_err());
    }

    #[test]
    fn train_keys_split() {
        let (m, t) = train_config(&kv("channels = 16,8\nteacher_channels = none\nmax_epochs = 3"), 2, 3).unwrap();
        let ModelSpec::Flint(f) = m else { panic!() };
        assert_eq!((f.n_blocks, f.teacher_channels, t.max_epochs), (2, None, 3));
        let (m, t) = train_config(&kv("model = hyper\nhidden = 4,4"), 2, 3).unwrap();
        assert!(matches!(m, ModelSpec::Hyper(ref h) if h.hidden == [4, 4] && h.param_dim == 3));
        assert_eq!(t.mode, flint_core::trainer::TrainMode::Hyper);
        assert!(train_config(&kv("hidden = 4,4"), 2, 3).is_err());
        assert!(train_config(&kv("nonsense = 4"), 2, 3).is_err());
    }
}
