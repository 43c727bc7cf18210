//! Operator entry point: run federations, sweep experiment axes, play
//! aggregator-side attacks, exercise the key ceremony, and validate
//! participation matrices. Every run persists its effective configuration
//! next to its outputs so results can be regenerated.

use clap::{Parser, Subcommand, ValueEnum};
use detrust::adversary::{self, AttackKind, AttackOutcome};
use detrust::config::{RunConfig, RunMode};
use detrust::encoding::FusionMode;
use detrust::fl::engine::{run_encrypted, run_plaintext, AggregatorHooks, RunOutcome, RunOutput};
use detrust::metrics::{render_metrics_csv, InteractionReport};
use detrust::participation::{
    check_batch_privacy, disaggregation_rank_test, party_inspect, ParticipationMatrix,
    TrustConfig, Verdict,
};
use detrust::{derive_seed, dmcfe, PartyId};
use rand::SeedableRng;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "detrust",
    version,
    about = "Federated learning with encrypted aggregation and negotiated participation"
)]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the payload encoding precision (decimal digits).
    #[arg(long, global = true)]
    precision: Option<u32>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the transport backend.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory; defaults to the config's out_dir or ./detrust-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one federation end to end and write metrics, the interaction
    /// report, and the final model.
    Run {
        /// Override the fusion rule.
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Weighted fusion draws base weights from registered sample counts.
        #[arg(long)]
        weights_from_samples: bool,
        /// Override the federation size.
        #[arg(long)]
        parties: Option<usize>,
        /// Override the number of training rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Plaintext reference run: no encryption, no key server, direct
        /// per-party queries. Reports the baseline interaction pattern.
        #[arg(long)]
        plaintext: bool,
    },
    /// Run one federation per axis value and write a summary CSV.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        /// Run the sweep points concurrently in isolated instances.
        #[arg(long)]
        parallel: bool,
    },
    /// Play a misbehaving aggregator; exits nonzero if the attack succeeds.
    Attack {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Party whose update the attack tries to read.
        #[arg(long, default_value_t = 1)]
        target: u32,
        /// Comma-separated ids of parties the aggregator controls.
        #[arg(long, value_delimiter = ',')]
        colluders: Vec<u32>,
        /// Sweep coalition sizes and report the smallest that recovers the
        /// target (isolation only).
        #[arg(long)]
        boundary: bool,
    },
    /// Run the brokered key ceremony and self-test the derived material.
    KeygenCeremony {
        /// Ceremony size; defaults to the config's party count.
        #[arg(long)]
        parties: Option<usize>,
    },
    /// Check a participation matrix file against trust and privacy rules.
    ValidateMatrix {
        /// JSON matrix document ({"m": .., "n": .., "rows": [[[num, den], ..], ..]}).
        matrix: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Sim,
    Tcp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FusionArg {
    Average,
    Weighted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Parties,
    Precision,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Isolation,
    Disaggregation,
    Replay,
    TwoFaced,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Isolation => AttackKind::Isolation,
            KindArg::Disaggregation => AttackKind::Disaggregation,
            KindArg::Replay => AttackKind::Replay,
            KindArg::TwoFaced => AttackKind::TwoFaced,
        }
    }
}

/// Prints to stdout, swallowing broken pipes so downstream `head` is fine.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            let doc = json!({ "error": format!("{err:#}") });
            eprintln!("{doc}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.precision {
        cfg.encoding.precision = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            ModeArg::Sim => RunMode::Sim,
            ModeArg::Tcp => RunMode::Tcp,
        };
    }
    if std::env::var("DETRUST_INSECURE_SMALL_GROUP").as_deref() == Ok("1") {
        cfg.group.allow_insecure = true;
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("detrust-out"));
    cfg.out_dir = Some(out_dir.clone());

    match cli.cmd {
        Cmd::Run {
            fusion,
            weights_from_samples,
            parties,
            rounds,
            plaintext,
        } => {
            if let Some(f) = fusion {
                cfg.fusion = match f {
                    FusionArg::Average => FusionMode::Average,
                    FusionArg::Weighted => FusionMode::Weighted,
                };
            }
            if weights_from_samples {
                cfg.weights_from_samples = true;
            }
            if let Some(n) = parties {
                cfg.parties = n;
            }
            if let Some(m) = rounds {
                cfg.rounds = m;
            }
            cfg.validate()?;
            cmd_run(&cfg, &out_dir, plaintext)
        }
        Cmd::Sweep {
            axis,
            values,
            parallel,
        } => {
            cfg.validate()?;
            cmd_sweep(&cfg, &out_dir, axis, &values, parallel)
        }
        Cmd::Attack {
            kind,
            target,
            colluders,
            boundary,
        } => {
            cfg.validate()?;
            cmd_attack(&cfg, &out_dir, kind, target, &colluders, boundary)
        }
        Cmd::KeygenCeremony { parties } => cmd_keygen_ceremony(&cfg, parties),
        Cmd::ValidateMatrix { matrix } => cmd_validate_matrix(&cfg, &matrix),
    }
}

fn outcome_status(outcome: &RunOutcome) -> &'static str {
    match outcome {
        RunOutcome::Completed => "completed",
        RunOutcome::ConsensusRejected { .. } => "consensus-rejected",
        RunOutcome::RoundFailed { .. } => "round-failed",
    }
}

/// Writes the standard output set for one finished run.
fn write_run_outputs(cfg: &RunConfig, out: &RunOutput, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config.json"))?;
    std::fs::write(dir.join("metrics.csv"), render_metrics_csv(&out.metrics))?;
    let rounds = out
        .matrix
        .as_ref()
        .map(|m| m.rounds() as u64)
        .unwrap_or(cfg.rounds as u64);
    InteractionReport::build(rounds, cfg.parties as u64, out.meter.clone())
        .write(&dir.join("interactions.json"))?;
    let model = json!({
        "params": out.final_model,
        "accuracy": out.final_accuracy,
        "loss": out.metrics.last().map(|r| r.loss),
        "rounds_completed": out.metrics.len(),
    });
    std::fs::write(
        dir.join("model.json"),
        serde_json::to_string_pretty(&model)? + "\n",
    )?;
    std::fs::write(dir.join("report.json"), out.aggregator_view_json() + "\n")?;
    Ok(())
}

fn cmd_run(cfg: &RunConfig, out_dir: &Path, plaintext: bool) -> anyhow::Result<i32> {
    if plaintext && cfg.mode == RunMode::Tcp {
        anyhow::bail!("plaintext reference runs only exist on the sim backend");
    }
    let started = Instant::now();
    let out = if plaintext {
        run_plaintext(cfg)?
    } else {
        run_encrypted(cfg, AggregatorHooks::default())?
    };
    let wall = started.elapsed();
    write_run_outputs(cfg, &out, out_dir)?;

    let status = outcome_status(&out.outcome);
    emit(&json!({
            "status": status,
            "accuracy": out.final_accuracy,
            "rounds": out.metrics.len(),
            "interactions": out.meter.table_total(),
            "consensus_messages": out.meter.consensus,
            "wall_ms": wall.as_millis() as u64,
            "out_dir": out_dir,
        })
        .to_string());
    if matches!(out.outcome, RunOutcome::Completed) {
        Ok(0)
    } else {
        let doc = json!({ "error": "run did not complete", "outcome": out.outcome });
        eprintln!("{doc}");
        Ok(1)
    }
}

struct SweepRow {
    value: u64,
    status: String,
    accuracy: f64,
    loss: f64,
    wall_ms: u64,
    interactions: u64,
    bytes_tx: u64,
}

fn sweep_point(base: &RunConfig, axis: AxisArg, value: u64, dir: &Path) -> SweepRow {
    let mut cfg = base.clone();
    match axis {
        AxisArg::Parties => cfg.parties = value as usize,
        AxisArg::Precision => cfg.encoding.precision = value as u32,
    }
    let failed = |status: String| SweepRow {
        value,
        status,
        accuracy: f64::NAN,
        loss: f64::NAN,
        wall_ms: 0,
        interactions: 0,
        bytes_tx: 0,
    };
    if let Err(err) = cfg.validate() {
        return failed(format!("invalid: {err}"));
    }
    let started = Instant::now();
    match run_encrypted(&cfg, AggregatorHooks::default()) {
        Ok(out) => {
            let wall = started.elapsed().as_millis() as u64;
            if let Err(err) = write_run_outputs(&cfg, &out, dir) {
                return failed(format!("write failed: {err}"));
            }
            let last = out.metrics.last();
            SweepRow {
                value,
                status: outcome_status(&out.outcome).to_string(),
                accuracy: out.final_accuracy,
                loss: last.map(|r| r.loss).unwrap_or(f64::NAN),
                wall_ms: wall,
                interactions: out.meter.table_total(),
                bytes_tx: last.map(|r| r.bytes_tx).unwrap_or(0),
            }
        }
        Err(err) => failed(format!("error: {err}")),
    }
}

fn cmd_sweep(
    base: &RunConfig,
    out_dir: &Path,
    axis: AxisArg,
    values: &[u64],
    parallel: bool,
) -> anyhow::Result<i32> {
    std::fs::create_dir_all(out_dir)?;
    base.save(&out_dir.join("config.json"))?;
    let axis_name = match axis {
        AxisArg::Parties => "parties",
        AxisArg::Precision => "precision",
    };
    let dirs: Vec<PathBuf> = values
        .iter()
        .map(|v| out_dir.join(format!("{axis_name}-{v}")))
        .collect();

    let rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = values
                .iter()
                .zip(&dirs)
                .map(|(v, dir)| scope.spawn(move || sweep_point(base, axis, *v, dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| match h.join() {
                    Ok(row) => row,
                    Err(_) => SweepRow {
                        value: 0,
                        status: "panicked".into(),
                        accuracy: f64::NAN,
                        loss: f64::NAN,
                        wall_ms: 0,
                        interactions: 0,
                        bytes_tx: 0,
                    },
                })
                .collect()
        })
    } else {
        values
            .iter()
            .zip(&dirs)
            .map(|(v, dir)| sweep_point(base, axis, *v, dir))
            .collect()
    };

    let mut csv = String::from("axis,value,status,final_accuracy,final_loss,wall_ms,interactions,bytes_tx\n");
    for row in &rows {
        csv.push_str(&format!(
            "{axis_name},{},{},{:.6},{:.6},{},{},{}\n",
            row.value, row.status, row.accuracy, row.loss, row.wall_ms, row.interactions, row.bytes_tx
        ));
    }
    let summary = out_dir.join("summary.csv");
    std::fs::write(&summary, &csv)?;
    emit(csv.trim_end());
    emit(&json!({ "summary": summary }).to_string());

    let any_completed = rows.iter().any(|r| r.status == "completed");
    Ok(if any_completed { 0 } else { 1 })
}

fn cmd_attack(
    cfg: &RunConfig,
    out_dir: &Path,
    kind: KindArg,
    target: u32,
    colluders: &[u32],
    boundary: bool,
) -> anyhow::Result<i32> {
    std::fs::create_dir_all(out_dir)?;
    if boundary {
        if !matches!(kind, KindArg::Isolation) {
            anyhow::bail!("--boundary only applies to the isolation attack");
        }
        let report = adversary::collusion_boundary(cfg, PartyId(target))?;
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(out_dir.join("attack.json"), text.clone() + "\n")?;
        emit(&text);
        return Ok(0);
    }
    let colluders: BTreeSet<u32> = colluders.iter().copied().collect();
    let report = adversary::run_attack(cfg, kind.into(), PartyId(target), &colluders)?;
    let text = report.to_json();
    std::fs::write(out_dir.join("attack.json"), text.clone() + "\n")?;
    emit(&text);
    Ok(match report.outcome {
        AttackOutcome::Succeeded { .. } => 4,
        _ => 0,
    })
}

fn hex_of(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Brokered pairwise-seed agreement plus an encrypt/decrypt self-test, so an
/// operator can check key material coherence before communicating anything.
fn cmd_keygen_ceremony(cfg: &RunConfig, parties: Option<usize>) -> anyhow::Result<i32> {
    let n = parties.unwrap_or(cfg.parties);
    let group = cfg.group.build()?;
    let pp = dmcfe::setup(
        group,
        n,
        cfg.encoding.payload_bound(),
        cfg.encoding.max_weight_scale(cfg.fusion),
    )?;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "ceremony", 0));

    let keypairs: Vec<dmcfe::DhKeypair> = (0..n)
        .map(|_| dmcfe::DhKeypair::generate(&pp.group, &mut rng))
        .collect();
    let mut secrets: Vec<dmcfe::PartySecretKey> = (0..n)
        .map(|i| dmcfe::PartySecretKey {
            party: PartyId::from_index(i),
            s1: pp.group.random_scalar(&mut rng),
            s2: pp.group.random_scalar(&mut rng),
            pairwise: Default::default(),
        })
        .collect();
    let mut symmetric = true;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = PartyId::from_index(i);
            let b = PartyId::from_index(j);
            let seed_ab =
                dmcfe::derive_pairwise_seed(&pp.group, &keypairs[i], &keypairs[j].public, a, b);
            let seed_ba =
                dmcfe::derive_pairwise_seed(&pp.group, &keypairs[j], &keypairs[i].public, b, a);
            symmetric &= seed_ab == seed_ba;
            secrets[i].pairwise.insert(b.0, seed_ab);
            secrets[j].pairwise.insert(a.0, seed_ba);
        }
    }

    // Round-trip check: encrypt one bounded vector per party, derive key
    // shares for plain summation, combine, decrypt, compare.
    use rand::Rng;
    let dim = 4usize;
    let bound = pp.payload_bound as i64;
    let payloads: Vec<Vec<i64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect())
        .collect();
    let weights = vec![1i64; n];
    let tag = dmcfe::FusionTag::new(0, &weights);
    let label = tag.as_bytes().to_vec();
    let cts: Vec<dmcfe::Ciphertext> = secrets
        .iter()
        .zip(&payloads)
        .map(|(sk, x)| dmcfe::encrypt(&pp, sk, x, &label))
        .collect::<dmcfe::Result<_>>()?;
    let shares: Vec<dmcfe::KeyShare> = secrets
        .iter()
        .map(|sk| dmcfe::key_der_share(&pp, sk, &weights, &tag))
        .collect::<dmcfe::Result<_>>()?;
    let dk = dmcfe::key_der_comb(&pp, &shares)?;
    let decrypted = dmcfe::decrypt(&pp, &dk, &cts, &weights, &label)?;
    let expected: Vec<i64> = (0..dim)
        .map(|k| payloads.iter().map(|x| x[k]).sum())
        .collect();
    let roundtrip_ok = decrypted == expected;

    let doc = json!({
        "parties": n,
        "lambda": pp.group.lambda,
        "group_digest": hex_of(&pp.group.q.to_bytes_be()),
        "dh_publics": keypairs.iter().map(|k| hex_of(&k.public.to_bytes_be())).collect::<Vec<_>>(),
        "pairwise_seeds_symmetric": symmetric,
        "roundtrip_ok": roundtrip_ok,
    });
    emit(&serde_json::to_string_pretty(&doc)?);
    Ok(if symmetric && roundtrip_ok { 0 } else { 1 })
}

fn cmd_validate_matrix(cfg: &RunConfig, path: &Path) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(path)?;
    let matrix: ParticipationMatrix = serde_json::from_str(&text)?;
    let locals = cfg.trust.expand(matrix.parties());
    if locals.len() != matrix.parties() {
        anyhow::bail!(
            "config lists {} local thresholds but the matrix has {} parties",
            locals.len(),
            matrix.parties()
        );
    }
    let trust = TrustConfig::new(locals.clone(), cfg.trust.min_batch_size);
    trust.validate()?;
    let t_g = locals.iter().copied().max().unwrap_or(0) as usize;

    let thresholds_ok = (0..matrix.rounds()).all(|i| matrix.support(i).len() >= t_g);
    let bp_ok = check_batch_privacy(&matrix, cfg.trust.min_batch_size);
    let exposed = disaggregation_rank_test(&matrix);
    let verdicts: serde_json::Map<String, serde_json::Value> = (1..=matrix.parties() as u32)
        .map(|p| {
            let party = PartyId(p);
            let column = matrix.column(party);
            let v = party_inspect(&matrix, party, &trust, &column);
            (format!("P{p}"), json!(verdict_kind(&v)))
        })
        .collect();

    let ok = thresholds_ok && bp_ok && exposed.is_empty();
    let doc = json!({
        "rounds": matrix.rounds(),
        "parties": matrix.parties(),
        "digest": matrix.digest(),
        "thresholds_satisfied": thresholds_ok,
        "batch_privacy": bp_ok,
        "rank_test_exposes": exposed,
        "verdicts": verdicts,
        "ok": ok,
    });
    emit(&serde_json::to_string_pretty(&doc)?);
    Ok(if ok { 0 } else { 1 })
}

fn verdict_kind(v: &Verdict) -> &'static str {
    v.kind()
}
