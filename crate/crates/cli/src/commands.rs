//! One function per subcommand. Each returns the text printed on success.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use motiondiff::audio::{
    decode_features, detect_beats, onset_envelope, read_wav, synth_condition, AudioCondition, DEFAULT_BEAT_THRESHOLD,
    DEFAULT_HOP, DEFAULT_WIN,
};
use motiondiff::diffusion::{
    decode_mlp, encode_mlp, gradient_check, make_schedule, normal_matrix, q_sample, train_denoiser, MlpDenoiser,
};
use motiondiff::flow::{compose_flow, occlusion_mask, warp_image};
use motiondiff::image::{decode_ppm, encode_mask_pgm, encode_ppm};
use motiondiff::metrics::{
    beat_align_score, diversity, frechet_distance, gesture_beats, mean_beat_distance, motion_features, speed_curve,
    summarize, write_velocity_curve,
};
use motiondiff::motion::{decode_sequence, encode_sequence, unflatten, MotionSequence};
use motiondiff::sampler::{generate_long, junction_scores, write_scores_csv};
use motiondiff::tps::{bending_energy, decode_tps, encode_tps, read_pairs_csv, solve_tps, ControlPair, TpsTransform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{dataset_fps, load_dataset, synth_dataset, training_examples, write_dataset};
use crate::{read_bytes, write_bytes, CliError, PipelineConfig};

/// Probes used by the pre-training gradient check.
const GRADIENT_PROBES: usize = 20;

pub fn tps_solve(pairs_csv: &Path, out: &Path, regularization: f64) -> Result<String, CliError> {
    let file = fs::File::open(pairs_csv)
        .map_err(|e| CliError::parse(format!("cannot read {}: {e}", pairs_csv.display())))?;
    let pairs: Vec<ControlPair<f64>> = read_pairs_csv(file)?;
    let t = solve_tps(&pairs, regularization)?;
    write_bytes(out, &encode_tps(&t)?)?;
    Ok(format!(
        "control_points={}\nbending_energy={:e}\nmax_residual={:e}\n",
        t.len(),
        bending_energy(&t),
        t.max_residual(&pairs)
    ))
}

pub fn warp(
    image: &Path,
    transforms: &[PathBuf],
    out: &Path,
    mask_out: Option<&Path>,
    softness: f64,
    background: bool,
) -> Result<String, CliError> {
    if transforms.is_empty() {
        return Err(CliError::usage("warp needs at least one --transform"));
    }
    let src = decode_ppm::<f64>(&read_bytes(image)?)?;
    let ts = transforms
        .iter()
        .map(|p| Ok(decode_tps::<f64>(&read_bytes(p)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let flow = compose_flow(&ts, src.height, src.width, softness, background)?;
    let warped = warp_image(&src, &flow)?;
    write_bytes(out, &encode_ppm(&warped)?)?;
    let mask = occlusion_mask(&flow);
    let mask_path = mask_out.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("mask.pgm"));
    write_bytes(&mask_path, &encode_mask_pgm(flow.height, flow.width, &mask))?;
    let occluded = mask.iter().filter(|&&m| m).count();
    Ok(format!(
        "size={}x{}\ntransforms={}\noccluded_pixels={occluded}\nmask={}\n",
        src.width,
        src.height,
        ts.len(),
        mask_path.display()
    ))
}

pub fn synth_data(cfg: &PipelineConfig, out_dir: &Path, seed: u64) -> Result<String, CliError> {
    let items = synth_dataset(cfg, seed)?;
    write_dataset(out_dir, &items, seed)?;
    let beats: usize = items.iter().map(|i| i.audio.beats.len()).sum();
    Ok(format!(
        "seed={seed}\nsequences={}\nframes={}\nchannels={}\naudio_dim={}\nbeats={beats}\n",
        items.len(),
        cfg.sequence_frames,
        cfg.channels(),
        cfg.audio_dim
    ))
}

pub fn train(
    cfg: &PipelineConfig,
    data_dir: &Path,
    out: &Path,
    loss_csv: Option<&Path>,
    seed: u64,
) -> Result<String, CliError> {
    let items = load_dataset(data_dir)?;
    dataset_fps(&items)?;
    let examples = training_examples(&items, cfg.m, cfg.stride)?;
    let (channels, audio_dim) = (examples[0].motion.ncols(), examples[0].cond.audio.ncols());
    let mut model = MlpDenoiser::<f64>::new(channels, audio_dim, cfg.train.hidden, seed)?;
    let tc = motiondiff::diffusion::TrainConfig { seed, ..cfg.train.clone() };

    let sched = make_schedule::<f64>(tc.diffusion_steps, tc.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = &examples[0];
    let t = tc.diffusion_steps.div_ceil(2);
    let noise = normal_matrix(&mut rng, probe.motion.nrows(), channels);
    let x_t = q_sample(&probe.motion, t, &noise, &sched)?;
    let check = gradient_check(&model, probe, &x_t, t, false, tc.lambda_vel, tc.lambda_acc, GRADIENT_PROBES, seed)?;

    let report = train_denoiser(&mut model, &examples, &tc)?;
    write_bytes(out, &encode_mlp(&model)?)?;
    if let Some(path) = loss_csv {
        let mut csv = format!("# seed={seed}\nstep,loss\n");
        for (i, l) in report.loss_curve.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l:e}");
        }
        write_bytes(path, csv.as_bytes())?;
    }
    let reduction = 1.0 - report.probe_after / report.probe_before;
    Ok(format!(
        "seed={seed}\nexamples={}\nparameters={}\ngradient_check_max_rel_error={:e}\nprobe_loss_before={:e}\nprobe_loss_after={:e}\nprobe_loss_reduction={reduction:.4}\n",
        examples.len(),
        model.num_params(),
        check.max_rel_error,
        report.probe_before,
        report.probe_after
    ))
}

/// Conditioning frames for generation: an `MDAF` file as is, or a WAV
/// whose detected onsets drive a synthetic condition at the model's width.
pub fn load_condition(
    path: &Path,
    cfg: &PipelineConfig,
    audio_dim: usize,
    seed: u64,
) -> Result<AudioCondition<f64>, CliError> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"RIFF") {
        let clip = read_wav::<f64>(&bytes)?;
        let env = onset_envelope(&clip, DEFAULT_WIN, DEFAULT_HOP)?;
        let beats = detect_beats(&env, DEFAULT_HOP, clip.sample_rate, DEFAULT_BEAT_THRESHOLD);
        let frames = (clip.duration() * cfg.fps.as_f64()).floor() as usize;
        let limit = frames as f64 / cfg.fps.as_f64();
        let beats: Vec<f64> = beats.into_iter().filter(|&b| b <= limit).collect();
        Ok(synth_condition(&beats, frames.max(1), cfg.fps, audio_dim, seed)?)
    } else {
        Ok(decode_features(&bytes)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOutputs<'a> {
    pub scores_csv: Option<&'a Path>,
    pub render_source: Option<&'a Path>,
    pub render_dir: Option<&'a Path>,
}

pub fn generate(
    cfg: &PipelineConfig,
    model_path: &Path,
    audio_path: &Path,
    seed_motion_path: &Path,
    out: &Path,
    extra: &GenerateOutputs<'_>,
    seed: u64,
) -> Result<String, CliError> {
    let model = decode_mlp::<f64>(&read_bytes(model_path)?)?;
    let cond = load_condition(audio_path, cfg, model.audio_dim(), seed)?;
    if cond.channels() != model.audio_dim() {
        return Err(CliError::numeric(format!(
            "audio features have {} channels, model expects {}",
            cond.channels(),
            model.audio_dim()
        )));
    }
    let seed_seq: MotionSequence<f64> = decode_sequence(&read_bytes(seed_motion_path)?)?;
    if seed_seq.channels() != model.motion_dim() {
        return Err(CliError::numeric(format!(
            "seed motion has {} channels, model expects {}",
            seed_seq.channels(),
            model.motion_dim()
        )));
    }
    let seed_frame = seed_seq.frames.row(seed_seq.len() - 1).to_owned();
    let sched = make_schedule::<f64>(cfg.train.diffusion_steps, cfg.train.schedule)?;
    let long = generate_long(&model, &cond.features, &seed_frame, &sched, &cfg.long_config(seed))?;
    let seq = MotionSequence::new(long.motion.clone(), cond.fps)?;
    write_bytes(out, &encode_sequence(&seq)?)?;

    let mut report = format!(
        "seed={seed}\nframes={}\nsegments={}\ncandidates={}\n",
        seq.len(),
        long.selections.len() + 1,
        cfg.candidates
    );
    let junctions = junction_scores(&long.motion, &long.junctions(cfg.m))?;
    if !junctions.is_empty() {
        let n = junctions.len() as f64;
        let pos: f64 = junctions.iter().map(|s| s.position).sum::<f64>() / n;
        let ang: f64 = junctions.iter().map(|s| s.angle).sum::<f64>() / n;
        let _ = write!(report, "junction_position_mean={pos:e}\njunction_angle_mean={ang:e}\n");
    }
    if let Some(path) = extra.scores_csv {
        let mut buf = format!("# seed={seed}\n").into_bytes();
        write_scores_csv(&long.selections, &mut buf)?;
        write_bytes(path, &buf)?;
    }
    match (extra.render_source, extra.render_dir) {
        (Some(src), Some(dir)) => {
            let frames = render_frames(cfg, src, &seed_frame, &seq, dir, seed)?;
            let _ = writeln!(report, "rendered_frames={frames}");
        }
        (None, None) => {}
        _ => return Err(CliError::usage("--render-source and --render-dir go together")),
    }
    Ok(report)
}

/// Warps `source` once per generated frame. Each group's TPS maps that
/// frame's keypoints back onto the seed keypoints drawn in the source.
fn render_frames(
    cfg: &PipelineConfig,
    source: &Path,
    seed_frame: &ndarray::Array1<f64>,
    seq: &MotionSequence<f64>,
    dir: &Path,
    seed: u64,
) -> Result<usize, CliError> {
    if cfg.n < 3 {
        return Err(CliError::usage(format!("rendering needs at least 3 keypoints per group, config has n={}", cfg.n)));
    }
    let src = decode_ppm::<f64>(&read_bytes(source)?)?;
    let seed_seq = MotionSequence::new(seed_frame.clone().insert_axis(ndarray::Axis(0)), seq.fps)?;
    let rest = unflatten(&seed_seq, cfg.k, cfg.n)?.remove(0);
    let frames = unflatten(seq, cfg.k, cfg.n)?;
    let mut index = format!("# seed={seed}\n");
    for (i, frame) in frames.iter().enumerate() {
        let transforms = rest
            .groups
            .iter()
            .zip(&frame.groups)
            .map(|(a, b)| {
                let pairs: Vec<_> = a.iter().zip(b).map(|(&s, &d)| ControlPair::new(s, d)).collect();
                solve_tps(&pairs, 0.0)
            })
            .collect::<Result<Vec<TpsTransform<f64>>, _>>()?;
        let flow = compose_flow(&transforms, src.height, src.width, cfg.softness, true)?;
        let name = format!("frame_{i:05}.ppm");
        write_bytes(&dir.join(&name), &encode_ppm(&warp_image(&src, &flow)?)?)?;
        let _ = writeln!(index, "{name}");
    }
    write_bytes(&dir.join("frames.txt"), index.as_bytes())?;
    Ok(frames.len())
}

fn collect_sequences(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| CliError::parse(format!("cannot list {}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".mdsq") && !name.starts_with("seed_")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::numeric(format!("no motion sequences in {}", path.display())));
    }
    Ok(files)
}

/// Audio file paired with a sequence: the file itself, or for a directory
/// `audio_<suffix>.mdaf` where the sequence stem is `<prefix>_<suffix>`.
fn audio_for(audio: &Path, seq: &Path) -> Result<PathBuf, CliError> {
    if audio.is_file() {
        return Ok(audio.to_path_buf());
    }
    let stem = seq.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let suffix = stem.split_once('_').map(|(_, s)| s).unwrap_or(stem);
    let p = audio.join(format!("audio_{suffix}.mdaf"));
    if !p.is_file() {
        return Err(CliError::parse(format!("no audio file {} for {}", p.display(), seq.display())));
    }
    Ok(p)
}

pub fn metrics(
    cfg: &PipelineConfig,
    generated: &Path,
    reference: Option<&Path>,
    audio: &Path,
    out_dir: &Path,
) -> Result<String, CliError> {
    let files = collect_sequences(generated)?;
    let mut rows = String::from("file,frames,gesture_beats,bas,mean_beat_distance\n");
    let mut feats = Vec::with_capacity(files.len());
    let mut bas_sum = 0.0;
    let mut bas_count = 0usize;
    for f in &files {
        let seq: MotionSequence<f64> = decode_sequence(&read_bytes(f)?)?;
        let cond: AudioCondition<f64> = decode_features(&read_bytes(&audio_for(audio, f)?)?)?;
        let beats = gesture_beats(&seq, cfg.sigma_smooth)?;
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("?");
        let (bas, dist) = if cond.beats.is_empty() {
            (String::from("nan"), String::from("nan"))
        } else {
            let b = beat_align_score(&cond.beats, &beats, cfg.sigma_b)?;
            bas_sum += b;
            bas_count += 1;
            let d = mean_beat_distance(&cond.beats, &beats)?;
            (format!("{b:.6}"), d.map_or("nan".into(), |d| format!("{d:.6}")))
        };
        let _ = writeln!(rows, "{name},{},{},{bas},{dist}", seq.len(), beats.len());
        let curve = speed_curve(&seq, cfg.sigma_smooth)?;
        let mut buf = Vec::new();
        write_velocity_curve(&curve, &mut buf)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("seq");
        write_bytes(&out_dir.join("velocity").join(format!("{stem}.csv")), &buf)?;
        feats.push(motion_features(&seq)?);
    }
    write_bytes(&out_dir.join("metrics.csv"), rows.as_bytes())?;

    let mut summary = format!("sequences={}\n", files.len());
    if bas_count > 0 {
        let _ = writeln!(summary, "bas_mean={:.6}", bas_sum / bas_count as f64);
    }
    if feats.len() >= 2 {
        let _ = writeln!(summary, "diversity={:.6}", diversity(&feats)?);
    }
    if let Some(r) = reference {
        let ref_feats = collect_sequences(r)?
            .iter()
            .map(|f| Ok(motion_features(&decode_sequence::<f64>(&read_bytes(f)?)?)?))
            .collect::<Result<Vec<_>, CliError>>()?;
        if ref_feats[0].len() != feats[0].len() {
            return Err(CliError::numeric("generated and reference sequences have different channel counts"));
        }
        let fd = frechet_distance(&summarize(&feats)?, &summarize(&ref_feats)?)?;
        let _ = writeln!(summary, "frechet={fd:.6}");
    }
    write_bytes(&out_dir.join("summary.txt"), summary.as_bytes())?;
    Ok(summary)
}

/// Beat times of a WAV (onset peaks), an `MDAF` file (stored beats) or an
/// `MDSQ` file (gesture beats).
pub fn beats(cfg: &PipelineConfig, input: &Path, out: Option<&Path>, threshold: f64) -> Result<String, CliError> {
    let bytes = read_bytes(input)?;
    let (source, times) = if bytes.starts_with(b"RIFF") {
        let clip = read_wav::<f64>(&bytes)?;
        let env = onset_envelope(&clip, DEFAULT_WIN, DEFAULT_HOP)?;
        ("onset", detect_beats(&env, DEFAULT_HOP, clip.sample_rate, threshold))
    } else if bytes.starts_with(b"MDAF") {
        ("features", decode_features::<f64>(&bytes)?.beats)
    } else if bytes.starts_with(b"MDSQ") {
        ("gesture", gesture_beats(&decode_sequence::<f64>(&bytes)?, cfg.sigma_smooth)?)
    } else {
        return Err(CliError::parse(format!("{}: expected a WAV, MDAF or MDSQ file", input.display())));
    };
    let mut csv = String::from("beat,time\n");
    for (i, t) in times.iter().enumerate() {
        let _ = writeln!(csv, "{i},{t:.6}");
    }
    if let Some(p) = out {
        write_bytes(p, csv.as_bytes())?;
    }
    Ok(format!("source={source}\nbeats={}\n{csv}", times.len()))
}
