use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itarflow::eval::{self, MixtureTarget};
use itarflow::flow::TokenSequence;
use itarflow::io::{
    emit_image_grid, load_dataset, read_pnm, run_meta, split_grid, Checkpoint, ImageShape, RunConfig, RunSink, Task,
};
use itarflow::oracle::energy_distance;
use itarflow::sampler::{ar_generate, denoise_ode, Guidance, SampleRequest};
use itarflow::trainer::{patchify, train as run_training, unpatchify, Image};

use crate::CliError;

pub fn train(config: &Path, resume: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let data = load_dataset(&cfg)?;
    let state = match resume {
        Some(p) => Some(Checkpoint::load(p)?.into_state()),
        None => None,
    };
    let meta = run_meta(&cfg, data.image);
    let mut sink = RunSink::create(&cfg.out_dir, meta, state.is_some())?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let state = run_training(&cfg.train_config(), data.dataset.as_ref(), &mut sink, state)?;
    let step = state.step;
    let path = sink.finish(state)?;
    println!("trained {step} steps; checkpoint {}", path.display());
    Ok(())
}

pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub count: usize,
    pub class: Option<usize>,
    pub cfg: f64,
    pub guidance: Guidance,
    pub steps: usize,
    pub t_max: Option<f64>,
    pub t_min: Option<f64>,
    pub final_tweedie: bool,
    pub seed: u64,
    pub out: PathBuf,
}

fn noise_range(ckpt: &Checkpoint, t_max: Option<f64>, t_min: Option<f64>) -> Result<(f64, f64), CliError> {
    let t_max = t_max
        .or_else(|| ckpt.meta_f64("t_max"))
        .ok_or_else(|| CliError::new("checkpoint records no t_max; pass --tmax"))?;
    let t_min = t_min.or_else(|| ckpt.meta_f64("t_min")).unwrap_or(0.01);
    Ok((t_max, t_min))
}

pub fn sample(a: SampleArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (t_max, t_min) = noise_range(&ckpt, a.t_max, a.t_min)?;
    let request = SampleRequest {
        count: a.count,
        class: a.class,
        cfg_scale: a.cfg,
        guidance: a.guidance,
        steps: a.steps,
        t_max,
        t_min,
        final_tweedie: a.final_tweedie,
        seed: a.seed,
    };
    let noisy = ar_generate(&request, &ckpt.model)?;
    let clean = denoise_ode(&noisy, &request, &ckpt.model)?;
    std::fs::create_dir_all(&a.out)?;
    let written = match ImageShape::from_meta(&ckpt.meta) {
        Some(shape) => {
            let ext = if shape.channels == 3 { "ppm" } else { "pgm" };
            let (noisy_path, clean_path) = (a.out.join(format!("noisy.{ext}")), a.out.join(format!("samples.{ext}")));
            write_grid(&noisy, &ckpt, shape, &noisy_path)?;
            write_grid(&clean, &ckpt, shape, &clean_path)?;
            [noisy_path, clean_path]
        }
        None => {
            let dim = ckpt.model.config().total_dim();
            let (noisy_path, clean_path) = (a.out.join("noisy.csv"), a.out.join("samples.csv"));
            std::fs::write(&noisy_path, samples_csv(&noisy, dim))?;
            std::fs::write(&clean_path, samples_csv(&clean, dim))?;
            [noisy_path, clean_path]
        }
    };
    println!(
        "{} samples at t_max = {t_max}, {} denoising steps: {} and {}",
        a.count,
        a.steps,
        written[0].display(),
        written[1].display()
    );
    Ok(())
}

fn grid_shape(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

fn write_grid(flat: &[f64], ckpt: &Checkpoint, shape: ImageShape, path: &Path) -> Result<(), CliError> {
    let cfg = ckpt.model.config();
    let images = flat
        .chunks(cfg.total_dim())
        .map(|s| {
            let seq = TokenSequence::new(cfg.tokens, cfg.token_dim, s.to_vec())?;
            unpatchify(&seq, shape.height, shape.width, shape.channels, shape.patch)
                .map_err(|e| CliError::new(e.to_string()))
        })
        .collect::<Result<Vec<Image>, CliError>>()?;
    let (rows, cols) = grid_shape(images.len());
    emit_image_grid(&images, rows, cols, path)?;
    Ok(())
}

pub fn samples_csv(flat: &[f64], dim: usize) -> String {
    let mut s = (0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in flat.chunks(dim) {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", fields.join(","));
    }
    s
}

pub fn read_samples_csv(text: &str, dim: usize) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('x')) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim {
            return Err(CliError::new(format!(
                "line {} has {} values, the model expects {dim}",
                i + 1,
                fields.len()
            )));
        }
        for f in fields {
            out.push(
                f.parse::<f64>()
                    .map_err(|_| CliError::new(format!("line {}: {f:?} is not a number", i + 1)))?,
            );
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn denoise(
    ckpt_path: &Path,
    input: &Path,
    t: f64,
    steps: usize,
    class: Option<usize>,
    t_min: Option<f64>,
    final_tweedie: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (_, t_min) = noise_range(&ckpt, Some(t), t_min)?;
    let request = SampleRequest {
        class,
        steps,
        t_min,
        final_tweedie,
        ..SampleRequest::new(0, t)
    };
    let ext = input
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let out = out.unwrap_or_else(|| input.with_file_name(format!("denoised.{ext}")));
    let cfg = ckpt.model.config();
    if ext == "pgm" || ext == "ppm" {
        let shape = ImageShape::from_meta(&ckpt.meta)
            .ok_or_else(|| CliError::new("checkpoint was not trained on images; pass a CSV file"))?;
        let grid = read_pnm(input)?;
        let tiles = split_grid(&grid, shape.height, shape.width)?;
        let mut flat = Vec::with_capacity(tiles.len() * cfg.total_dim());
        for tile in &tiles {
            let seq = patchify(tile, shape.patch).map_err(|e| CliError::new(e.to_string()))?;
            if (seq.tokens(), seq.dim()) != (cfg.tokens, cfg.token_dim) {
                return Err(CliError::new("grid tiles do not match the model's image size"));
            }
            flat.extend_from_slice(seq.data());
        }
        let clean = denoise_ode(&flat, &request, &ckpt.model)?;
        write_grid(&clean, &ckpt, shape, &out)?;
        println!("denoised {} tiles from t = {t}: {}", tiles.len(), out.display());
    } else {
        let flat = read_samples_csv(&std::fs::read_to_string(input)?, cfg.total_dim())?;
        let clean = denoise_ode(&flat, &request, &ckpt.model)?;
        std::fs::write(&out, samples_csv(&clean, cfg.total_dim()))?;
        println!(
            "denoised {} samples from t = {t}: {}",
            flat.len() / cfg.total_dim(),
            out.display()
        );
    }
    Ok(())
}

pub fn eval(ckpt_path: &Path, task: &str, samples: usize, steps: usize, seed: u64) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let task: Task = task.parse()?;
    let model = &ckpt.model;
    let cfg = model.config();
    let (t_max, t_min) = noise_range(&ckpt, None, None)?;
    if let Some(trained) = ckpt.meta.get("task") {
        if trained != task.name() {
            println!("note: checkpoint was trained on {trained}");
        }
    }
    if samples < 3 {
        return Err(CliError::new("need at least 3 samples"));
    }
    let request = SampleRequest {
        steps,
        t_min,
        seed,
        ..SampleRequest::new(samples, t_max)
    };
    println!("task {task}, t in [{t_min}, {t_max}], {samples} samples, {steps} denoising steps");
    match task.mixture() {
        Some(mixture) => {
            if mixture.dim() != cfg.total_dim() {
                return Err(CliError::new(format!(
                    "task {task} has dimension {}, the model {}",
                    mixture.dim(),
                    cfg.total_dim()
                )));
            }
            let target = MixtureTarget::new(mixture, cfg.num_classes > 0);
            let nll = eval::nll_vs_oracle(model, &target, (t_min, t_max), samples, seed)?;
            println!(
                "nll          model {:.4} nats/dim, oracle {:.4} nats/dim, gap {:.4}",
                nll.model,
                nll.oracle,
                nll.gap()
            );
            for t in [0.1, 0.3, 0.5].into_iter().filter(|&t| t <= t_max) {
                let c = eval::score_cosine(model, &target, t, samples, seed + 1)?;
                println!("score cosine at t = {t}: {c:.4}");
            }
            let reference = target.clean(samples, seed + 2);
            let noisy = eval::generate(model, &target, &request, samples)?;
            let clean = eval::denoise(&noisy, &target, &request, model)?;
            let ed = energy_distance(&clean, &reference, target.dim())?;
            let tweedie = eval::tweedie(&noisy, &target, t_max, model)?;
            let ed_tweedie = energy_distance(&tweedie, &reference, target.dim())?;
            let floor = eval::analytic_floor(&target, &request, samples, &reference, seed + 3)?;
            println!("energy dist  model {:.5} ± {:.5}", ed.value, ed.std_error);
            println!(
                "             single Tweedie step {:.5} ± {:.5}",
                ed_tweedie.value, ed_tweedie.std_error
            );
            println!(
                "             analytic pipeline {:.5} ± {:.5}",
                floor.value, floor.std_error
            );
        }
        None if task == Task::Checkerboard2d => {
            if cfg.total_dim() != 2 {
                return Err(CliError::new("checkerboard-2d needs a two-dimensional model"));
            }
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed + 2);
            let mut reference = vec![0.0; 2 * samples];
            for p in reference.chunks_mut(2) {
                itarflow::io::Checkerboard::sample(&mut rng, p);
            }
            let noisy = ar_generate(&request, model)?;
            let clean = denoise_ode(&noisy, &request, model)?;
            let ed = energy_distance(&clean, &reference, 2)?;
            let raw = energy_distance(&noisy, &reference, 2)?;
            println!("energy dist  model {:.5} ± {:.5}", ed.value, ed.std_error);
            println!("             before denoising {:.5} ± {:.5}", raw.value, raw.std_error);
        }
        None => return Err(CliError::new(format!("task {task} has no analytic reference"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let flat = vec![0.1, -2.5, 3.0, 1e-9];
        let text = samples_csv(&flat, 2);
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(read_samples_csv(&text, 2).unwrap(), flat);
        assert!(read_samples_csv(&text, 3).is_err());
    }

    #[test]
    fn grids_are_nearly_square() {
        assert_eq!(grid_shape(1), (1, 1));
        assert_eq!(grid_shape(10), (3, 4));
        assert_eq!(grid_shape(16), (4, 4));
    }
}
