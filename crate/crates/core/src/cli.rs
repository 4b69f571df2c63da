//! Command-line front end: `verify`, `variance`, `train`, `enumerate-report`.
//!
//! Exit codes: 0 success, 1 a check failed (including a model file that
//! fails validation under `verify`), 2 infeasible or unusable input.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::estimate::{
    paired_variance, prop1_sampled, single_sample_gradient, EstimatorKind, VarianceReport,
};
use crate::exact::{
    cross_term, exact_gradient_fullreturn, exact_gradient_prefix, exact_gradient_q,
    finite_diff_gradient, fullreturn_gradient_by_score_index, objective_prefix_form,
    objective_trajectory_form, prefix_gradient_by_score_index, prefix_mass,
    q_table_enumeration_gap, q_values, reward_to_go_gradient_with_offset, trajectory_mass,
    DEFAULT_FD_STEP,
};
use crate::instance::{bandit, chain_instance, random_instance, ChainSpec, GenSpec};
use crate::mdp::{
    enumerate_trajectories, prefix_density, sample_trajectory, trajectory_density,
    trajectory_return, Mdp,
};
use crate::policy::{GradientVector, SoftmaxPolicy};
use crate::rng::{mix_seed, substream};
use crate::stats::{Status, FAIL_Z, PASS_Z};
use crate::train::{ascend, GradientSource, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "pgverify";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = TOOL_NAME, version, about = "Verify policy-gradient identities on tabular MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full identity and estimator check suite on one instance.
    Verify(VerifyArgs),
    /// Paired variance comparison of estimators, as CSV or JSON.
    Variance(VarianceArgs),
    /// Gradient ascent with the exact objective logged per step.
    Train(TrainArgs),
    /// List every trajectory with its density and return.
    EnumerateReport(EnumerateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InstanceArgs {
    /// MDP specification file (JSON).
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    /// Policy logits file (JSON); defaults to zero logits with --mdp.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Random instance `S,A,T,scale`, generated from --seed.
    #[arg(long)]
    pub gen: Option<String>,
    /// Built-in instance: `bandit`.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Override the enumeration cap.
    #[arg(long, default_value_t = crate::mdp::DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Monte Carlo samples per statistical check.
    #[arg(long, default_value_t = 100_000)]
    pub n: u64,
    /// Relative tolerance for gradient route equality.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Replace the reward-to-go route with an off-by-one version; the
    /// route-equality check is then expected to fail.
    #[arg(long)]
    pub mutate_reward_to_go: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VarianceArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Positive-reward chain family `S,T`.
    #[arg(long)]
    pub chain: Option<String>,
    /// Number of instances for --gen or --chain sweeps.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: u64,
    /// `csv` or `json`.
    #[arg(long, default_value = "csv")]
    pub format: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// Trajectories per sampled gradient.
    #[arg(long = "n", default_value_t = 256)]
    pub batch: u64,
    /// `exact`, `full-return`, `reward-to-go` or `q-weighted`.
    #[arg(long, default_value = "exact")]
    pub estimator: String,
}

#[derive(Debug, Clone, Args)]
pub struct EnumerateArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Loads the instance, or says why it cannot. Validation errors are kept
/// apart from unreadable input so `verify` can report them as failed checks.
fn load_instance(args: &InstanceArgs, seed: u64) -> Result<(Mdp, SoftmaxPolicy, String)> {
    let chosen = [
        args.mdp.is_some(),
        args.gen.is_some(),
        args.builtin.is_some(),
    ]
    .iter()
    .filter(|x| **x)
    .count();
    if chosen != 1 {
        return Err(Error::Usage(
            "give exactly one of --mdp, --gen, --builtin".into(),
        ));
    }
    let (mdp, policy, id) = if let Some(path) = &args.mdp {
        let mdp = Mdp::from_json_file(path)?;
        let policy = match &args.policy {
            Some(p) => SoftmaxPolicy::from_json_file(p)?,
            None => SoftmaxPolicy::uniform(mdp.num_states(), mdp.num_actions()),
        };
        let id = path
            .file_stem()
            .map_or_else(|| "mdp".to_string(), |s| s.to_string_lossy().into_owned());
        (mdp, policy, id)
    } else if let Some(text) = &args.gen {
        let spec = GenSpec::parse(text, seed).map_err(|e| Error::Usage(e.to_string()))?;
        let (mdp, policy) = random_instance(&spec)?;
        let policy = match &args.policy {
            Some(p) => SoftmaxPolicy::from_json_file(p)?,
            None => policy,
        };
        (mdp, policy, format!("gen-{text}-seed{seed}"))
    } else {
        let name = args.builtin.as_deref().unwrap_or_default();
        match name {
            "bandit" => {
                let (m, p) = bandit();
                (m, p, "bandit".to_string())
            }
            other => return Err(Error::Usage(format!("unknown builtin '{other}'"))),
        }
    };
    mdp.check_policy(&policy)?;
    Ok((mdp.with_enumeration_cap(args.cap), policy, id))
}

fn write_output(out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// CSV outputs carry their version, seed and settings in `<out>.meta.json`.
fn write_meta(out: &Option<PathBuf>, meta: serde_json::Value) -> Result<()> {
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(sidecar_path(path), text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    fn bound(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            status: Status::from_bound(measured, threshold),
            detail: None,
        }
    }

    fn z(name: impl Into<String>, max_z: f64) -> Self {
        Self {
            name: name.into(),
            measured: max_z,
            threshold: PASS_Z,
            status: Status::from_z(max_z),
            detail: None,
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// Every threshold the verification suite applies.
#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    pub probability: f64,
    pub exact_zero: f64,
    pub route_relative: f64,
    pub objective_relative: f64,
    pub dp_enumeration: f64,
    pub score_fd_step: f64,
    pub score_fd: f64,
    pub gradient_fd_step: f64,
    /// Scaled by `max(1, max|r| / 10)`.
    pub gradient_fd: f64,
    pub pass_z: f64,
    pub fail_z: f64,
}

impl Tolerances {
    pub fn with_route_tolerance(route_relative: f64) -> Self {
        Self {
            probability: crate::mdp::PROB_TOLERANCE,
            exact_zero: 1e-12,
            route_relative,
            objective_relative: crate::exact::OBJECTIVE_FORM_TOLERANCE,
            dp_enumeration: 1e-12,
            score_fd_step: 1e-5,
            score_fd: 1e-8,
            gradient_fd_step: DEFAULT_FD_STEP,
            gradient_fd: 1e-6,
            pass_z: PASS_Z,
            fail_z: FAIL_Z,
        }
    }
}

/// Options for [`verify_instance`].
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub samples: u64,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub mutate_reward_to_go: bool,
}

/// Number of sampled trajectories whose prefixes get finite-difference checks.
const PREFIX_FD_TRAJECTORIES: u64 = 16;

fn relative_gap(a: &GradientVector, b: &GradientVector, scale: f64) -> f64 {
    a.max_abs_diff(b) / scale
}

/// Runs every check on one instance. Errors only for infeasible enumeration
/// or other input problems; failed checks are reported, not returned as errors.
pub fn verify_instance(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    opts: &VerifyOptions,
) -> Result<Vec<Check>> {
    let tol = &opts.tolerances;
    let horizon = mdp.horizon();
    let mut checks = Vec::new();
    mdp.sequence_count(horizon)?;

    // densities and the policy
    checks.push(Check::bound(
        "trajectory-mass",
        (trajectory_mass(mdp, policy)? - 1.0).abs(),
        tol.probability,
    ));
    let mut worst_prefix_mass: f64 = 0.0;
    for t in 1..=horizon {
        worst_prefix_mass = worst_prefix_mass.max((prefix_mass(mdp, policy, t)? - 1.0).abs());
    }
    checks.push(Check::bound(
        "prefix-mass",
        worst_prefix_mass,
        tol.probability,
    ));

    let mut expected_score: f64 = 0.0;
    let mut score_fd: f64 = 0.0;
    let h = tol.score_fd_step;
    for s in 0..mdp.num_states() {
        let mut acc = GradientVector::zeros(policy.num_params());
        for (a, p) in policy.action_probs(s).into_iter().enumerate() {
            let score = policy.score(s, a);
            acc.add_scaled(&score, p);
            for k in 0..policy.num_params() {
                let fd = (policy.perturbed(k, h).log_prob(s, a)
                    - policy.perturbed(k, -h).log_prob(s, a))
                    / (2.0 * h);
                score_fd = score_fd.max((fd - score[k]).abs());
            }
        }
        expected_score = expected_score.max(acc.max_abs());
    }
    checks.push(Check::bound(
        "expected-score-zero",
        expected_score,
        tol.exact_zero,
    ));
    checks.push(Check::bound(
        "score-finite-difference",
        score_fd,
        tol.score_fd,
    ));

    let mut prefix_fd: f64 = 0.0;
    let mut density_gap: f64 = 0.0;
    for k in 0..PREFIX_FD_TRAJECTORIES {
        let traj = sample_trajectory(mdp, policy, &mut substream(mix_seed(opts.seed, 0xFD), k));
        let full = trajectory_density(mdp, policy, &traj)?;
        let at_horizon = prefix_density(mdp, policy, &traj.prefix(horizon)?)?;
        density_gap = density_gap.max((full - at_horizon).abs());
        for t in 1..=horizon {
            let prefix = traj.prefix(t)?;
            let score = policy.prefix_score(&prefix);
            for i in 0..policy.num_params() {
                let plus = prefix_density(mdp, &policy.perturbed(i, h), &prefix)?.ln();
                let minus = prefix_density(mdp, &policy.perturbed(i, -h), &prefix)?.ln();
                prefix_fd = prefix_fd.max(((plus - minus) / (2.0 * h) - score[i]).abs());
            }
        }
    }
    checks.push(Check::bound("prefix-density-at-horizon", density_gap, 0.0));
    checks.push(Check::bound(
        "prefix-score-finite-difference",
        prefix_fd,
        tol.score_fd,
    ));

    // objective and the three gradient routes
    let j_full = objective_trajectory_form(mdp, policy)?;
    let j_prefix = objective_prefix_form(mdp, policy)?;
    checks.push(Check::bound(
        "objective-forms",
        (j_full - j_prefix).abs() / j_full.abs().max(1.0),
        tol.objective_relative,
    ));

    let prefix = exact_gradient_prefix(mdp, policy)?;
    let full = exact_gradient_fullreturn(mdp, policy)?;
    let q_route = exact_gradient_q(mdp, policy)?;
    let offset = usize::from(opts.mutate_reward_to_go);
    let rtg = reward_to_go_gradient_with_offset(mdp, policy, offset)?;
    let scale = prefix.max_abs().max(1.0);
    checks.push(Check::bound(
        "route-equality/full-return",
        relative_gap(&prefix, &full, scale),
        tol.route_relative,
    ));
    checks.push(Check::bound(
        "route-equality/q-weighted",
        relative_gap(&prefix, &q_route, scale),
        tol.route_relative,
    ));
    let mut rtg_check = Check::bound(
        "route-equality/reward-to-go",
        relative_gap(&prefix, &rtg, scale),
        tol.route_relative,
    );
    if opts.mutate_reward_to_go {
        rtg_check = rtg_check.with_detail("mutation self-test: reward-to-go shifted by one step");
    }
    checks.push(rtg_check);

    // zero-expectation of past-reward pairings and the regrouping identities
    let prefix_terms = prefix_gradient_by_score_index(mdp, policy)?;
    let full_terms = fullreturn_gradient_by_score_index(mdp, policy)?;
    let mut past: f64 = 0.0;
    let mut future_gap: f64 = 0.0;
    let mut all_gap: f64 = 0.0;
    for j in 1..=horizon {
        let mut future = GradientVector::zeros(policy.num_params());
        let mut all = GradientVector::zeros(policy.num_params());
        for t in 1..=horizon {
            let c = cross_term(mdp, policy, j, t)?;
            if t < j {
                past = past.max(c.max_abs());
            } else {
                future.add_scaled(&c, 1.0);
            }
            all.add_scaled(&c, 1.0);
        }
        future_gap = future_gap.max(future.max_abs_diff(&prefix_terms[j - 1]));
        all_gap = all_gap.max(all.max_abs_diff(&full_terms[j - 1]));
    }
    let mut past_check = Check::bound("cross-term-past-zero", past, tol.exact_zero);
    if horizon == 1 {
        past_check = past_check.with_detail("horizon 1 has no pairs with t < j");
    }
    checks.push(past_check);
    checks.push(Check::bound(
        "regrouping/future-rewards",
        future_gap,
        tol.exact_zero,
    ));
    checks.push(Check::bound(
        "regrouping/all-rewards",
        all_gap,
        tol.exact_zero,
    ));

    let fd = finite_diff_gradient(mdp, policy, tol.gradient_fd_step)?;
    let fd_threshold = tol.gradient_fd * (mdp.max_abs_reward() / 10.0).max(1.0);
    checks.push(Check::bound(
        "gradient-finite-difference",
        fd.max_abs_diff(&prefix),
        fd_threshold,
    ));

    let (q, v) = q_values(mdp, policy)?;
    checks.push(Check::bound(
        "q-table-enumeration",
        q_table_enumeration_gap(mdp, policy, &q)?,
        tol.dp_enumeration,
    ));
    let j_dp: f64 = (0..mdp.num_states())
        .map(|s| mdp.initial_prob(s) * v.get(1, s))
        .sum();
    checks.push(Check::bound(
        "value-objective",
        (j_dp - j_full).abs() / j_full.abs().max(1.0),
        tol.dp_enumeration,
    ));

    // Monte Carlo
    let report = paired_variance(
        "verify",
        mdp,
        policy,
        &EstimatorKind::ALL,
        opts.samples,
        opts.seed,
    )?;
    for est in &report.estimates {
        let kind = est.estimator.expect("paired estimates carry their kind");
        checks.push(Check::z(format!("mc-unbiased/{kind}"), est.max_z(&prefix)));
    }
    let zero = GradientVector::zeros(policy.num_params());
    for j in 2..=horizon {
        for t in 1..j {
            let seed = mix_seed(opts.seed, (j * 1000 + t) as u64);
            let est = prop1_sampled(mdp, policy, j, t, opts.samples, seed)?;
            checks.push(Check::z(
                format!("cross-term-sampled/j={j},t={t}"),
                est.max_z(&zero),
            ));
        }
    }

    if horizon == 1 {
        let (q, _) = q_values(mdp, policy)?;
        let mut identical = true;
        for traj in enumerate_trajectories(mdp)? {
            let f = single_sample_gradient(mdp, policy, None, &traj, EstimatorKind::FullReturn)?;
            let r = single_sample_gradient(mdp, policy, None, &traj, EstimatorKind::RewardToGo)?;
            let w = single_sample_gradient(mdp, policy, Some(&q), &traj, EstimatorKind::QWeighted)?;
            identical &=
                f.0.iter()
                    .zip(&r.0)
                    .zip(&w.0)
                    .all(|((a, b), c)| a.to_bits() == b.to_bits() && a.to_bits() == c.to_bits());
        }
        checks.push(Check::bound(
            "horizon-one/single-sample-identical",
            if identical { 0.0 } else { 1.0 },
            0.0,
        ));
        let ratio_gap = report.ratio.map_or(0.0, |r| (r - 1.0).abs());
        let mut c = Check::bound("horizon-one/variance-ratio", ratio_gap, 0.0);
        if report.ratio.is_none() {
            c = c.with_detail("full-return trace is zero; ratio undefined");
        }
        checks.push(c);
    }
    Ok(checks)
}

fn run_verify(args: &VerifyArgs) -> Result<i32> {
    let tolerances = Tolerances::with_route_tolerance(args.tol);
    let seed = args.common.seed;
    let header = |instance: serde_json::Value| {
        json!({
            "schema_version": SCHEMA_VERSION,
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "seed": seed,
            "n": args.n,
            "tolerances": tolerances,
            "instance": instance,
        })
    };
    let (mdp, policy, id) = match load_instance(&args.instance, seed) {
        Ok(x) => x,
        Err(Error::Validation(msg)) => {
            let mut report = header(json!({ "id": null }));
            let check = Check {
                name: "mdp-validation".into(),
                measured: f64::NAN,
                threshold: 0.0,
                status: Status::Fail,
                detail: Some(msg.clone()),
            };
            report["checks"] = json!([check]);
            report["status"] = json!(Status::Fail);
            emit_json(&args.common.out, &report)?;
            eprintln!("validation failed: {msg}");
            return Ok(EXIT_CHECK_FAILED);
        }
        Err(e) => return Err(e),
    };
    let opts = VerifyOptions {
        samples: args.n,
        seed,
        tolerances: tolerances.clone(),
        mutate_reward_to_go: args.mutate_reward_to_go,
    };
    let checks = verify_instance(&mdp, &policy, &opts)?;
    let worst = checks
        .iter()
        .map(|c| c.status)
        .max()
        .unwrap_or(Status::Pass);
    let mut report = header(json!({
        "id": id,
        "num_states": mdp.num_states(),
        "num_actions": mdp.num_actions(),
        "horizon": mdp.horizon(),
    }));
    report["mutate_reward_to_go"] = json!(args.mutate_reward_to_go);
    report["checks"] = serde_json::to_value(&checks)?;
    report["status"] = json!(worst);
    emit_json(&args.common.out, &report)?;
    for c in checks.iter().filter(|c| c.status != Status::Pass) {
        eprintln!(
            "{:?}: {} measured {:e} threshold {:e}",
            c.status, c.name, c.measured, c.threshold
        );
    }
    Ok(if worst == Status::Fail {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    })
}

fn emit_json(out: &Option<PathBuf>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_output(out, text.as_bytes())
}

/// Instances selected by the variance command's flags.
fn variance_instances(args: &VarianceArgs) -> Result<Vec<(String, Mdp, SoftmaxPolicy)>> {
    let seed = args.common.seed;
    if let Some(text) = &args.chain {
        if args.instance.mdp.is_some()
            || args.instance.gen.is_some()
            || args.instance.builtin.is_some()
        {
            return Err(Error::Usage("--chain excludes other instance flags".into()));
        }
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let parsed: Option<(usize, usize)> = match parts.as_slice() {
            [s, t] => s.parse().ok().zip(t.parse().ok()),
            _ => None,
        };
        let (num_states, horizon) =
            parsed.ok_or_else(|| Error::Usage(format!("expected --chain S,T, got '{text}'")))?;
        return (0..args.count)
            .map(|i| {
                let spec = ChainSpec {
                    num_states,
                    horizon,
                    seed: seed.wrapping_add(i as u64),
                };
                let (m, p) = chain_instance(&spec)?;
                Ok((
                    format!("chain-{i:03}"),
                    m.with_enumeration_cap(args.instance.cap),
                    p,
                ))
            })
            .collect();
    }
    if let Some(text) = &args.instance.gen {
        return (0..args.count)
            .map(|i| {
                let instance_seed = seed.wrapping_add(i as u64);
                let (m, p) = random_instance(&GenSpec::parse(text, instance_seed)?)?;
                Ok((
                    format!("gen-{i:03}"),
                    m.with_enumeration_cap(args.instance.cap),
                    p,
                ))
            })
            .collect();
    }
    let (m, p, id) = load_instance(&args.instance, seed)?;
    Ok(vec![(id, m, p)])
}

/// Median of the defined ratios.
pub fn median_ratio(reports: &[VarianceReport]) -> Option<f64> {
    let mut ratios: Vec<f64> = reports.iter().filter_map(|r| r.ratio).collect();
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    let mid = ratios.len() / 2;
    Some(if ratios.len() % 2 == 1 {
        ratios[mid]
    } else {
        0.5 * (ratios[mid - 1] + ratios[mid])
    })
}

/// CSV rows `instance_id,kind,trace,ratio,n,seed,schema_version`.
pub fn variance_csv(reports: &[VarianceReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "instance_id",
        "kind",
        "trace",
        "ratio",
        "n",
        "seed",
        "schema_version",
    ])?;
    for report in reports {
        let ratio = report.ratio.map(|r| r.to_string()).unwrap_or_default();
        for est in &report.estimates {
            let kind = est.estimator.map(|k| k.as_str()).unwrap_or_default();
            w.write_record([
                report.instance_id.as_str(),
                kind,
                &est.covariance_trace.to_string(),
                &ratio,
                &report.sample_count.to_string(),
                &report.seed.to_string(),
                &SCHEMA_VERSION.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn run_variance(args: &VarianceArgs) -> Result<i32> {
    let instances = variance_instances(args)?;
    let seed = args.common.seed;
    let reports = instances
        .iter()
        .map(|(id, mdp, policy)| {
            paired_variance(id, mdp, policy, &EstimatorKind::ALL, args.n, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let median = median_ratio(&reports);
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "seed": seed,
        "n": args.n,
        "instances": reports.len(),
        "median_ratio": median,
    });
    match args.format.as_str() {
        "csv" => {
            write_output(&args.common.out, &variance_csv(&reports)?)?;
            write_meta(&args.common.out, meta)?;
        }
        "json" => {
            let mut doc = meta;
            doc["reports"] = serde_json::to_value(&reports)?;
            emit_json(&args.common.out, &doc)?;
        }
        other => return Err(Error::Usage(format!("unknown format '{other}'"))),
    }
    if let Some(m) = median {
        eprintln!("median reward-to-go / full-return trace ratio: {m}");
    }
    Ok(EXIT_OK)
}

fn run_train(args: &TrainArgs) -> Result<i32> {
    let (mdp, policy, id) = load_instance(&args.instance, args.common.seed)?;
    let estimator: GradientSource = args.estimator.parse()?;
    let config = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        batch_size: args.batch,
        estimator,
        seed: args.common.seed,
        snapshot_every: 0,
    };
    let history = ascend(&mdp, &policy, &config)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "J_exact", "grad_norm", "schema_version"])?;
    for r in &history.records {
        w.write_record([
            r.step.to_string(),
            r.j_exact.to_string(),
            r.grad_norm.to_string(),
            SCHEMA_VERSION.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_output(&args.common.out, &bytes)?;
    write_meta(
        &args.common.out,
        json!({
            "schema_version": SCHEMA_VERSION,
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "instance": id,
            "seed": args.common.seed,
            "config": config,
            "final_logits": history.final_logits,
        }),
    )?;
    Ok(EXIT_OK)
}

fn run_enumerate(args: &EnumerateArgs) -> Result<i32> {
    let (mdp, policy, id) = load_instance(&args.instance, args.common.seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "states", "actions", "density", "return"])?;
    let join = |xs: &[usize]| {
        xs.iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (i, traj) in enumerate_trajectories(&mdp)?.enumerate() {
        w.write_record([
            i.to_string(),
            join(traj.states()),
            join(traj.actions()),
            trajectory_density(&mdp, &policy, &traj)?.to_string(),
            trajectory_return(&mdp, &traj).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_output(&args.common.out, &bytes)?;
    write_meta(
        &args.common.out,
        json!({
            "schema_version": SCHEMA_VERSION,
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "instance": id,
            "seed": args.common.seed,
            "total_mass": trajectory_mass(&mdp, &policy)?,
            "objective": objective_trajectory_form(&mdp, &policy)?,
        }),
    )?;
    Ok(EXIT_OK)
}

fn workers(command: &Command) -> usize {
    match command {
        Command::Verify(a) => a.common.workers,
        Command::Variance(a) => a.common.workers,
        Command::Train(a) => a.common.workers,
        Command::EnumerateReport(a) => a.common.workers,
    }
}

/// Executes a parsed command and returns its exit code.
pub fn execute(cli: &Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(workers(&cli.command))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_BAD_INPUT;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Verify(a) => run_verify(a),
        Command::Variance(a) => run_variance(a),
        Command::Train(a) => run_train(a),
        Command::EnumerateReport(a) => run_enumerate(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_BAD_INPUT
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_BAD_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}
