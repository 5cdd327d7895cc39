//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::engine::{oracle_prefill, prefill, run_scenario, MoRefConfig, Scenario, TokenSource};
use crate::error::{Error, Result};
use crate::flops::{count_full, count_moref, preset_report, Preset, SeqDims};
use crate::model::{init_random, ModelConfig, Weights};
use crate::partition::{build_plan, PartitionPlan};
use crate::routing::{run_routing_suite, RecallTask, RoutingReport};

#[derive(Parser, Debug)]
#[command(
    name = "moref",
    about = "Chunked multi-reference inference for a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and print its report as JSON.
    Run(RunArgs),
    /// Largest logit difference between chunked inference and dense attention.
    OracleDiff(RunArgs),
    /// MAC counts for a scenario or a preset.
    Flops(FlopsArgs),
    /// Render the vision-to-vision reachability mask of a partition.
    Mask(MaskArgs),
    /// Gating and recall accuracy on the hand-wired recall model.
    Recall(RecallArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct MorefFlags {
    /// Temporal units.
    #[arg(long)]
    m: Option<usize>,
    /// Chunks.
    #[arg(long)]
    n: Option<usize>,
    /// Layer at which chunks merge, or `none`.
    #[arg(long, value_parser = parse_fusion_layer)]
    fusion_layer: Option<FusionLayer>,
    /// Fraction of vision tokens dropped at fusion.
    #[arg(long)]
    drop_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    moref: MorefFlags,
    /// Weight initialisation seed; defaults to the model config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Model config JSON; defaults to a small toy model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON; defaults to a generated prompt.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Include gating and fusion traces.
    #[arg(long)]
    trace: bool,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// One of table1-128, table1-256, table1-512.
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    moref: MorefFlags,
    /// Model config JSON; defaults to a small toy model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON; defaults to a generated prompt.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long, default_value_t = 8)]
    vis_len: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Directory for the `.txt` and `.pgm` renderings.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecallArgs {
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    /// Chunk counts to sweep; repeatable.
    #[arg(long, default_values_t = vec![2, 4])]
    n: Vec<usize>,
    /// Restrict needles to one chunk.
    #[arg(long)]
    needle_chunk: Option<usize>,
    #[arg(long, value_parser = parse_fusion_layer)]
    fusion_layer: Option<FusionLayer>,
    /// Full per-case report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `--fusion-layer` value: a layer index or `none`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct FusionLayer(Option<usize>);

fn parse_fusion_layer(s: &str) -> std::result::Result<FusionLayer, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(FusionLayer(None));
    }
    s.parse()
        .map(|l| FusionLayer(Some(l)))
        .map_err(|_| format!("expected a layer index or `none`, got `{s}`"))
}

impl MorefFlags {
    fn apply(&self, base: &MoRefConfig) -> MoRefConfig {
        let mut c = base.clone();
        if let Some(m) = self.m {
            c.m_units = m;
        }
        if let Some(n) = self.n {
            c.n_chunks = n;
        }
        if let Some(FusionLayer(l)) = self.fusion_layer {
            c.fusion_layer = l;
        }
        if self.drop_rate.is_some() {
            c.drop_rate = self.drop_rate;
        }
        c
    }
}

fn default_scenario() -> Scenario {
    Scenario {
        sys_tokens: TokenSource::Generated { seed: 1, len: 4 },
        vis_tokens: TokenSource::Generated { seed: 2, len: 64 },
        ques_tokens: TokenSource::Generated { seed: 3, len: 8 },
        max_new: 4,
        moref: MoRefConfig::default(),
    }
}

fn load_model(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::toy(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    path.map_or_else(|| Ok(default_scenario()), Scenario::load)
}

struct Setup {
    weights: Weights,
    scenario: Scenario,
    moref: MoRefConfig,
}

fn setup(args: &RunArgs) -> Result<Setup> {
    let cfg = load_model(args.config.as_deref())?;
    let weights = init_random(&cfg, args.seed.unwrap_or(cfg.seed))?;
    let scenario = load_scenario(args.scenario.as_deref())?;
    let mut moref = args.moref.apply(&scenario.moref);
    moref.flags.trace |= args.trace;
    Ok(Setup {
        weights,
        scenario,
        moref,
    })
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n"))?,
        None => writeln!(stdout, "{text}")?,
    }
    Ok(())
}

fn to_json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

#[derive(Serialize)]
struct OracleDiff {
    moref: MoRefConfig,
    question_rows: usize,
    max_abs_diff: f32,
}

fn oracle_diff(args: &RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let s = setup(args)?;
    let seq = s.scenario.sequence(s.weights.config.vocab_size);
    let moref = prefill(&s.weights, &seq, &s.moref)?;
    let oracle = oracle_prefill(&s.weights, &seq)?;
    let diff = OracleDiff {
        question_rows: moref.logits.rows(),
        max_abs_diff: moref.logits.max_abs_diff(&oracle.logits),
        moref: s.moref,
    };
    emit(&to_json(&diff)?, args.out.as_deref(), stdout)
}

fn flops(args: &FlopsArgs, stdout: &mut dyn Write) -> Result<()> {
    let report = match &args.preset {
        Some(name) => {
            let preset = Preset::parse(name)
                .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
            preset_report(preset)?
        }
        None => {
            let cfg = load_model(args.config.as_deref())?;
            let scenario = load_scenario(args.scenario.as_deref())?;
            let moref = args.moref.apply(&scenario.moref);
            let dims = SeqDims::from(&scenario.sequence(cfg.vocab_size));
            count_moref(&cfg, dims, &moref)?.with_baseline(&count_full(&cfg, dims))
        }
    };
    emit(&to_json(&report)?, args.out.as_deref(), stdout)
}

/// Vision-to-vision reachability before fusion: `grid[i][j]` is true when
/// vision token `i` may attend to vision token `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRender {
    pub vis_len: usize,
    pub m_units: usize,
    pub n_chunks: usize,
    pub grid: Vec<Vec<bool>>,
}

pub fn render_vision_mask(plan: &PartitionPlan) -> MaskRender {
    let vis_len = plan.vis_len();
    let mut chunk = vec![0; vis_len];
    for (c, indices) in plan.chunk_index_map.iter().enumerate() {
        for &i in indices {
            chunk[i] = c;
        }
    }
    let grid = (0..vis_len)
        .map(|i| {
            (0..vis_len)
                .map(|j| j <= i && chunk[i] == chunk[j])
                .collect()
        })
        .collect();
    MaskRender {
        vis_len,
        m_units: plan.m_units,
        n_chunks: plan.n_chunks,
        grid,
    }
}

impl MaskRender {
    pub fn header(&self) -> String {
        format!(
            "vision mask vis_len={} m={} n={} (row attends to column, causal)",
            self.vis_len, self.m_units, self.n_chunks
        )
    }

    /// Header line, then one row of `#` (reachable) and `.` per query.
    pub fn to_ascii(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for row in &self.grid {
            s.extend(row.iter().map(|&b| if b { '#' } else { '.' }));
            s.push('\n');
        }
        s
    }

    /// Plain-text graymap, reachable cells white.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.vis_len, self.vis_len);
        for row in &self.grid {
            let cells: Vec<&str> = row.iter().map(|&b| if b { "255" } else { "0" }).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn file_stem(&self) -> String {
        format!(
            "mask_v{}_m{}_n{}",
            self.vis_len, self.m_units, self.n_chunks
        )
    }
}

fn mask(args: &MaskArgs, stdout: &mut dyn Write) -> Result<()> {
    let render = render_vision_mask(&build_plan(args.vis_len, args.m, args.n)?);
    write!(stdout, "{}", render.to_ascii())?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let stem = render.file_stem();
        std::fs::write(dir.join(format!("{stem}.txt")), render.to_ascii())?;
        std::fs::write(dir.join(format!("{stem}.pgm")), render.to_pgm())?;
    }
    Ok(())
}

fn routing_table(report: &RoutingReport) -> String {
    let mut s = format!(
        "recall pairs={} gating_layer={} fusion_layer={}\n",
        report.pairs,
        report.gating_layer,
        report
            .summary
            .fusion_layer
            .map_or("none".to_string(), |l| l.to_string())
    );
    s.push_str("n  needle_chunk  cases  argmax_omega_chunk  routed  moref_acc  oracle_acc\n");
    let mut groups: Vec<(usize, usize)> = report
        .cases
        .iter()
        .map(|c| (c.n_chunks, c.needle_chunk))
        .collect();
    groups.dedup();
    for (n, chunk) in groups {
        let cases: Vec<_> = report
            .cases
            .iter()
            .filter(|c| c.n_chunks == n && c.needle_chunk == chunk)
            .collect();
        let total = cases.len();
        let routed = cases.iter().filter(|c| c.routed_chunk == chunk).count();
        let mut routed_to: Vec<usize> = cases.iter().map(|c| c.routed_chunk).collect();
        routed_to.sort_unstable();
        routed_to.dedup();
        let routed_to: Vec<String> = routed_to.iter().map(usize::to_string).collect();
        let moref = cases
            .iter()
            .filter(|c| c.moref_token == c.expected_token)
            .count();
        let oracle = cases
            .iter()
            .filter(|c| c.oracle_token == c.expected_token)
            .count();
        s.push_str(&format!(
            "{n:<2} {chunk:<13} {total:<6} {:<18} {routed:>3}/{total:<3} {moref:>4}/{total:<4} {oracle:>4}/{total}\n",
            routed_to.join(",")
        ));
    }
    let sum = &report.summary;
    s.push_str(&format!(
        "total routed {}/{}  moref correct {}/{}  oracle correct {}/{}\n",
        sum.routed, sum.cases, sum.moref_correct, sum.cases, sum.oracle_correct, sum.cases
    ));
    s
}

fn recall(args: &RecallArgs, stdout: &mut dyn Write) -> Result<()> {
    let task = RecallTask::new(args.pairs)?;
    let report = run_routing_suite(
        &task,
        &args.n,
        args.needle_chunk,
        args.fusion_layer.and_then(|f| f.0),
    )?;
    write!(stdout, "{}", routing_table(&report))?;
    if let Some(p) = &args.out {
        std::fs::write(p, to_json(&report)?)?;
    }
    Ok(())
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let s = setup(&args)?;
            let report = run_scenario(&s.weights, &s.scenario, &s.moref)?;
            emit(&report.to_json()?, args.out.as_deref(), stdout)
        }
        Command::OracleDiff(args) => oracle_diff(&args, stdout),
        Command::Flops(args) => flops(&args, stdout),
        Command::Mask(args) => mask(&args, stdout),
        Command::Recall(args) => recall(&args, stdout),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success, 2 for usage or configuration errors, 1 for internal errors.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(m: usize, n: usize) -> MaskRender {
        render_vision_mask(&build_plan(8, m, n).unwrap())
    }

    #[test]
    fn single_chunk_mask_is_lower_triangular() {
        let r = mask_of(1, 1);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(r.grid[i][j], j <= i);
            }
        }
    }

    #[test]
    fn round_robin_mask() {
        let r = mask_of(4, 2);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(r.grid[i][j], j <= i && i % 2 == j % 2);
            }
        }
    }

    #[test]
    fn pgm_shape() {
        let pgm = mask_of(1, 2).to_pgm();
        let lines: Vec<&str> = pgm.lines().collect();
        assert_eq!(&lines[..3], &["P2", "8 8", "255"]);
        assert_eq!(lines[3], "255 0 0 0 0 0 0 0");
        assert_eq!(lines[7], "0 0 0 0 255 0 0 0");
        assert_eq!(lines.len(), 11);
    }

    #[test]
    fn fusion_layer_flag() {
        assert_eq!(parse_fusion_layer("none"), Ok(FusionLayer(None)));
        assert_eq!(parse_fusion_layer("3"), Ok(FusionLayer(Some(3))));
        assert!(parse_fusion_layer("x").is_err());
    }

    #[test]
    fn exit_codes() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["moref", "mask", "--bogus"], &mut out, &mut err), 2);
        assert!(String::from_utf8_lossy(&err).contains("Usage"));
        assert_eq!(
            run(["moref", "mask", "--vis-len", "9"], &mut out, &mut err),
            2
        );
        assert_eq!(run(["moref", "mask"], &mut out, &mut err), 0);
        assert_eq!(run(["moref", "--help"], &mut out, &mut err), 0);
    }
}
