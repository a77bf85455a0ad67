use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use flint_core::embed::{dataset_rows, embed_dataset, train_encoder, Backend, LatentEncoder};
use flint_core::evalkit::{
    epe, pareto_frontier, psnr, records_to_csv, stability_to_csv, subset_stability, Embedding2D, MetricRecord,
};
use flint_core::fieldio::{read_ensemble, read_raw, synth_ensemble, write_ensemble, write_raw, EnsembleSet, RawField};
use flint_core::pipeline::{interpolate_member, predictions_csv, summarize, Model, FLOW_SCALE_KEY};
use flint_core::trainer::{train_with, FlowScaling};

use crate::config;
use crate::pgm;
use crate::{CliError, EvalArgs, ExploreArgs, InferArgs, ParetoArgs, ProjectArgs, StabilityArgs, SynthArgs, TrainArgs};

type Res = Result<(), CliError>;

fn load_normalized(path: &Path, flows: bool) -> Result<(EnsembleSet, f64), CliError> {
    let mut set = read_ensemble(path)?;
    set.validate()?;
    let norm = set.normalize(flows);
    Ok((set, norm.flow_scale))
}

fn member_dir(out: &Path, m: usize) -> Result<std::path::PathBuf, CliError> {
    let d = out.join(format!("member_{m}"));
    fs::create_dir_all(&d)?;
    Ok(d)
}

pub fn synth(a: SynthArgs) -> Res {
    let mut cfg = config::synth_config(&config::load(a.config.as_deref())?)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let set = synth_ensemble(&cfg)?;
    let path = write_ensemble(&set, &a.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Res {
    let kv = config::load(a.config.as_deref())?;
    let raw = read_ensemble(&a.data)?;
    let first = raw.members.first().ok_or_else(|| CliError::Core(flint_core::Error::Invalid("empty ensemble".into())))?;
    let rank = first.timesteps[0].rank();
    let param_dim = first.sim_params.len();
    let (model, mut tc) = config::train_config(&kv, rank, param_dim)?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let (set, flow_scale) = load_normalized(&a.data, tc.flow_scaling == FlowScaling::Direct)?;
    let (mut params, hist) = train_with(&set, &model, &tc, None, |r| {
        eprintln!("epoch {} train {:.6e} val {:.6e} lr {:.3e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    })?;
    params.set_meta(FLOW_SCALE_KEY, flow_scale);
    fs::create_dir_all(&a.out)?;
    params.save(a.out.join("model.ckpt"))?;
    fs::write(a.out.join("history.csv"), hist.to_csv())?;
    println!("best epoch {} of {}", hist.best_epoch, hist.epochs.len());
    Ok(())
}

pub fn infer(a: InferArgs) -> Res {
    let model = Model::load(&a.checkpoint)?;
    let (set, _) = load_normalized(&a.data, false)?;
    let mut rows = Vec::with_capacity(set.members.len());
    for (m, member) in set.members.iter().enumerate() {
        let preds = interpolate_member(&model, member, a.rate)?;
        let dir = member_dir(&a.out, m)?;
        for p in preds.iter().filter(|p| p.velocity.is_some()) {
            write_raw(&RawField::Grid(p.pred.clone()), dir.join(format!("pred_{:04}.flg", p.frame)))?;
            if let Some(v) = &p.velocity {
                write_raw(&RawField::Flow(v.clone()), dir.join(format!("vel_{:04}.flg", p.frame)))?;
            }
            if a.pgm {
                pgm::write(&p.pred, dir.join(format!("pred_{:04}.pgm", p.frame)))?;
            }
        }
        rows.push((m, preds));
    }
    fs::write(a.out.join("predictions.csv"), predictions_csv(&rows))?;
    let all: Vec<_> = rows.into_iter().flat_map(|(_, p)| p).collect();
    if let Ok(s) = summarize(&all) {
        println!("frames {} psnr {:.4} linear {:.4}", s.frames, s.psnr, s.psnr_linear);
        if let (Some(e), Some(z)) = (s.epe, s.epe_zero) {
            println!("epe {e:.6} zero-flow {z:.6}");
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Res {
    let (set, _) = load_normalized(&a.data, false)?;
    let mut csv = String::from("member,frame,psnr,epe\n");
    let (mut n, mut sum_psnr, mut finite_psnr) = (0usize, 0.0, 0usize);
    let (mut ne, mut sum_epe) = (0usize, 0.0);
    for (m, member) in set.members.iter().enumerate() {
        let dir = a.pred.join(format!("member_{m}"));
        for k in 0..member.len() {
            let p = dir.join(format!("pred_{k:04}.flg"));
            if !p.exists() {
                continue;
            }
            let RawField::Grid(pred) = read_raw(&p)? else {
                return Err(flint_core::Error::Format(format!("{} is not a scalar grid", p.display())).into());
            };
            let q = psnr(&member.timesteps[k], &pred)?;
            let v = dir.join(format!("vel_{k:04}.flg"));
            let e = match (&member.flows, v.exists()) {
                (Some(f), true) => match read_raw(&v)? {
                    RawField::Flow(vel) => Some(epe(&f[k], &vel)?),
                    RawField::Grid(_) => return Err(flint_core::Error::Format(format!("{} is not a flow", v.display())).into()),
                },
                _ => None,
            };
            let _ = writeln!(csv, "{m},{k},{q},{}", e.map(|x| x.to_string()).unwrap_or_default());
            n += 1;
            if q.is_finite() {
                sum_psnr += q;
                finite_psnr += 1;
            }
            if let Some(e) = e {
                sum_epe += e;
                ne += 1;
            }
        }
    }
    if n == 0 {
        return Err(flint_core::Error::Invalid(format!("no predictions under {}", a.pred.display())).into());
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("eval.csv"), csv)?;
    let mut summary = format!("metric,value\nframes,{n}\n");
    if finite_psnr > 0 {
        let _ = writeln!(summary, "mean_psnr,{}", sum_psnr / finite_psnr as f64);
    }
    if ne > 0 {
        let _ = writeln!(summary, "mean_epe,{}", sum_epe / ne as f64);
    }
    fs::write(a.out.join("eval_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn project(a: ProjectArgs) -> Res {
    let (set, _) = load_normalized(&a.data, false)?;
    fs::create_dir_all(&a.out)?;
    let emb = match a.backend.as_str() {
        "pca" => {
            if a.config.is_some() {
                return Err(CliError::Usage("the pca backend takes no config".into()));
            }
            embed_dataset(&set, &Backend::Pca)?
        }
        kind => {
            let kv = config::load(a.config.as_deref())?;
            let rows = dataset_rows(&set);
            let (cfg, mut tc) = config::encoder_config(&kv, rows[0].len(), kind)?;
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            let mut enc = LatentEncoder::new(cfg, tc.seed)?;
            let hist = train_encoder(&mut enc, &rows, &tc)?;
            enc.save(a.out.join("encoder.ckpt"))?;
            eprintln!("encoder loss {:.6e} -> {:.6e}", hist[0], hist[hist.len() - 1]);
            embed_dataset(&set, &Backend::Encoder(&enc))?
        }
    };
    emb.save(a.out.join("embedding.csv"))?;
    let rec = MetricRecord::score(a.backend.clone(), &emb);
    let csv = records_to_csv(&[rec]);
    fs::write(a.out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// `(id, hit, silhouette)` rows from either accepted CSV layout.
fn pareto_rows(text: &str, origin: &Path) -> Result<Vec<(String, f64, f64)>, CliError> {
    let bad = |m: String| CliError::Core(flint_core::Error::Format(format!("{}: {m}", origin.display())));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?.trim();
    let mut out = Vec::new();
    if header == "model,metric,mean,sd,runs" {
        let mut acc: indexmap::IndexMap<String, (Option<f64>, Option<f64>)> = indexmap::IndexMap::new();
        for l in lines {
            let f: Vec<&str> = l.split(',').collect();
            let [model, metric, mean, ..] = f[..] else { return Err(bad(format!("bad row `{l}`"))) };
            let v: f64 = mean.parse().map_err(|_| bad(format!("bad value in `{l}`")))?;
            let e = acc.entry(model.to_string()).or_default();
            match metric {
                "neighborhood_hit" => e.0 = Some(v),
                "silhouette" => e.1 = Some(v),
                _ => {}
            }
        }
        for (m, (h, s)) in acc {
            match (h, s) {
                (Some(h), Some(s)) => out.push((m, h, s)),
                _ => return Err(bad(format!("model `{m}` lacks neighborhood_hit or silhouette"))),
            }
        }
    } else {
        for l in lines {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let [id, h, s] = f[..] else { return Err(bad(format!("expected id,hit,silhouette in `{l}`"))) };
            let p = |x: &str| x.parse::<f64>().map_err(|_| bad(format!("bad value in `{l}`")));
            out.push((id.to_string(), p(h)?, p(s)?));
        }
    }
    Ok(out)
}

pub fn pareto(a: ParetoArgs) -> Res {
    let mut rows = Vec::new();
    for p in &a.input {
        rows.extend(pareto_rows(&fs::read_to_string(p)?, p)?);
    }
    let objectives: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
    let front = pareto_frontier(&objectives)?;
    let mut csv = String::from("index,id,hit,silhouette\n");
    for &i in &front {
        let _ = writeln!(csv, "{i},{},{},{}", rows[i].0, rows[i].1, rows[i].2);
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("pareto.csv"), csv)?;
    let idx: Vec<String> = front.iter().map(usize::to_string).collect();
    println!("frontier {}", idx.join(","));
    Ok(())
}

pub fn stability(a: StabilityArgs) -> Res {
    let emb = match (&a.embedding, &a.data) {
        (Some(p), _) => Embedding2D::load(p)?,
        (None, Some(d)) => embed_dataset(&load_normalized(d, false)?.0, &Backend::Pca)?,
        (None, None) => return Err(CliError::Usage("pass --embedding or --data".into())),
    };
    let rows = subset_stability(&emb, &a.fractions, a.runs, a.seed)?;
    let csv = stability_to_csv(&rows);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("stability.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Parameter points of `--params` for a model with `dim` parameters.
pub fn parse_points(text: &str, dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("--params: cannot parse `{s}`")));
    let points: Vec<Vec<f64>> = if dim == 1 {
        text.split([',', ';']).filter(|s| !s.trim().is_empty()).map(|s| num(s).map(|v| vec![v])).collect::<Result<_, _>>()?
    } else {
        text.split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|p| p.split(',').map(num).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()?
    };
    if points.is_empty() {
        return Err(CliError::Usage("--params lists no points".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(CliError::Usage(format!("parameter point {p:?} has {} values, model expects {dim}", p.len())));
    }
    Ok(points)
}

pub fn explore(a: ExploreArgs) -> Res {
    let model = Model::load(&a.checkpoint)?;
    let Model::Hyper { cfg, .. } = &model else {
        return Err(flint_core::Error::Invalid("explore needs a HyperFLINT checkpoint".into()).into());
    };
    let points = parse_points(&a.params, cfg.param_dim)?;
    let (set, _) = load_normalized(&a.data, false)?;
    let member = set
        .members
        .get(a.member)
        .ok_or_else(|| CliError::Usage(format!("member {} out of range", a.member)))?;
    if !(a.start < a.end && a.end < member.len()) {
        return Err(CliError::Usage(format!("need start < end < {}", member.len())));
    }
    if !(a.tau > 0.0 && a.tau < 1.0) {
        return Err(CliError::Usage("--tau must lie in (0, 1)".into()));
    }
    let (ds, du) = (&member.timesteps[a.start], &member.timesteps[a.end]);
    let gap_tu = (a.end - a.start) as f64 * (1.0 - a.tau);
    let mut csv = String::from("index,params,mean_flow_magnitude,mean_frame\n");
    for (i, p) in points.iter().enumerate() {
        let r = model.predict(ds, du, a.tau, p)?;
        let vel = model.velocity(&r.flow_u, gap_tu)?;
        let dir = a.out.join(format!("point_{i}"));
        fs::create_dir_all(&dir)?;
        write_raw(&RawField::Grid(r.frame.clone()), dir.join("frame.flg"))?;
        write_raw(&RawField::Flow(vel.clone()), dir.join("velocity.flg"))?;
        write_raw(&RawField::Grid(r.mask.clone()), dir.join("mask.flg"))?;
        if a.pgm {
            pgm::write(&r.frame, dir.join("frame.pgm"))?;
        }
        let mag = (0..vel.cells()).map(|c| vel.at(c).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / vel.cells() as f64;
        let mean = r.frame.values().iter().sum::<f64>() / r.frame.cells() as f64;
        let ps: Vec<String> = p.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{i},{},{mag},{mean}", ps.join(" "));
    }
    fs::write(a.out.join("explore.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_parsing() {
        assert_eq!(parse_points("0.1,0.2,0.3", 1).unwrap(), vec![vec![0.1], vec![0.2], vec![0.3]]);
        assert_eq!(parse_points("1,2;3,4", 2).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(parse_points("1,2,3", 2).is_err());
        assert!(parse_points("", 1).is_err());
    }

    #[test]
    fn pareto_layouts() {
        let a = pareto_rows("id,hit,sil\na,1,0\nb,0,1\n", Path::new("x")).unwrap();
        assert_eq!(a[1], ("b".to_string(), 0.0, 1.0));
        let m = "model,metric,mean,sd,runs\npca,neighborhood_hit,0.9,0,1\npca,silhouette,0.4,0,1\npca,spread,0.2,0,1\n";
        assert_eq!(pareto_rows(m, Path::new("x")).unwrap(), vec![("pca".to_string(), 0.9, 0.4)]);
        assert!(pareto_rows("model,metric,mean,sd,runs\nae,spread,1,0,1\n", Path::new("x")).is_err());
    }
}
