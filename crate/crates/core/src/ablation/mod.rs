//! The design-rule ablations: activation value range, negative region,
//! passing point and placement, each as a suite of quotient-network cases.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::BlockKind;
use crate::data::{LabeledImage, NormStats};
use crate::error::{Error, Result};
use crate::layers::ActivationSpec;
use crate::model::{build, NetworkConfig};
use crate::train::{train_loop, Divergence, EpochRecord, TrainConfig};

pub const SUITE_NAMES: [&str; 5] = ["table4", "table5", "table6", "table7", "table8"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    /// Desk scale: a data subset and a short schedule.
    Smoke,
    /// The complete datasets and the full schedule of the base config.
    Full,
}

impl Scale {
    pub const SMOKE_TRAIN_IMAGES: usize = 5000;
    pub const SMOKE_TEST_IMAGES: usize = 1000;
    pub const SMOKE_EPOCHS: usize = 10;

    /// The base recipe with the epoch count (and proportionally the
    /// milestones) replaced at smoke scale.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        match self {
            Scale::Full => base.clone(),
            Scale::Smoke => {
                let epochs = Self::SMOKE_EPOCHS;
                let milestones = base.rescaled_milestones(epochs);
                TrainConfig { total_epochs: epochs, milestones, ..base.clone() }
            }
        }
    }

    /// Leading subsets of the train and held-out sets.
    pub fn subset<'a>(
        self,
        train: &'a [LabeledImage],
        test: &'a [LabeledImage],
    ) -> (&'a [LabeledImage], &'a [LabeledImage]) {
        match self {
            Scale::Full => (train, test),
            Scale::Smoke => {
                (&train[..train.len().min(Self::SMOKE_TRAIN_IMAGES)], &test[..test.len().min(Self::SMOKE_TEST_IMAGES)])
            }
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Smoke => "smoke",
            Scale::Full => "full",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "full" => Ok(Scale::Full),
            _ => Err(Error::InvalidArgument(format!("unknown scale `{s}` (expected smoke or full)"))),
        }
    }
}

/// What the middle column of a rendered suite shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    ValueRange,
    PassingPoint,
    Position,
}

impl Column {
    pub fn title(self) -> &'static str {
        match self {
            Column::ValueRange => "value range",
            Column::PassingPoint => "passing point",
            Column::Position => "position",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCase {
    pub name: String,
    pub depth: usize,
    pub activation: ActivationSpec,
    pub use_at_head: bool,
    pub use_at_shortcuts: bool,
    pub train_scale: Scale,
}

impl AblationCase {
    fn new(depth: usize, activation: ActivationSpec, head: bool, shortcuts: bool, scale: Scale) -> Self {
        let name = match (head, shortcuts) {
            (true, true) => activation.to_string(),
            _ => format!("{activation} @ {}", position_label(head, shortcuts)),
        };
        AblationCase { name, depth, activation, use_at_head: head, use_at_shortcuts: shortcuts, train_scale: scale }
    }

    pub fn network_config(&self, seed: u64) -> NetworkConfig {
        let mut c = NetworkConfig::new(BlockKind::Quotient, self.depth);
        c.quotient_activation = Some(self.activation.clone());
        c.head_uses_quotient_activation = self.use_at_head;
        c.shortcuts_use_quotient_activation = self.use_at_shortcuts;
        c.seed = seed;
        c
    }

    pub fn column_value(&self, column: Column) -> String {
        match column {
            Column::ValueRange => self.activation.value_range().to_string(),
            Column::PassingPoint => format!("(0, {})", fmt_short(self.activation.passing_value())),
            Column::Position => position_label(self.use_at_head, self.use_at_shortcuts).to_string(),
        }
    }
}

fn position_label(head: bool, shortcuts: bool) -> &'static str {
    match (head, shortcuts) {
        (false, false) => "null",
        (true, false) => "head",
        (false, true) => "shortcuts",
        (true, true) => "head + shortcuts",
    }
}

fn fmt_short(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    format!("{r}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub name: String,
    pub column: Column,
    pub cases: Vec<AblationCase>,
}

impl Suite {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.cases.iter().enumerate() {
            c.activation.validate()?;
            if self.cases[..i].iter().any(|d| d.name == c.name) {
                return Err(Error::InvalidArgument(format!("suite {}: duplicate case name `{}`", self.name, c.name)));
            }
        }
        Ok(())
    }
}

fn sig(scale: f64, k: f64, vshift: f64) -> ActivationSpec {
    // sigmoid(x - ln k) * scale + vshift
    ActivationSpec::Sigmoid { scale, hshift: k.ln(), vshift }
}

fn lin(shift: f64, lower: f64, upper: f64) -> ActivationSpec {
    ActivationSpec::ClippedLinear { shift, lower, upper }
}

/// Every built-in suite, in name order.
pub fn builtin_suites(scale: Scale) -> Vec<Suite> {
    let both = |depth: usize, specs: Vec<ActivationSpec>| -> Vec<AblationCase> {
        specs.into_iter().map(|s| AblationCase::new(depth, s, true, true, scale)).collect()
    };
    let passing = |depth: usize| {
        both(
            depth,
            vec![
                lin(0.5, 0.0, 4.0),
                lin(1.0, 0.0, 4.0),
                lin(1.5, 0.0, 4.0),
                sig(2.0, 3.0, 0.0),
                sig(2.0, 1.0, 0.0),
                sig(2.0, 1.0 / 3.0, 0.0),
            ],
        )
    };
    let mut placement = Vec::new();
    for spec in [lin(1.0, 0.0, 4.0), sig(2.0, 1.0, 0.0)] {
        for (head, shortcuts) in [(false, false), (true, false), (true, true)] {
            placement.push(AblationCase::new(20, spec.clone(), head, shortcuts, scale));
        }
    }
    vec![
        Suite {
            name: "table4".into(),
            column: Column::ValueRange,
            cases: both(
                20,
                vec![
                    ActivationSpec::Relu,
                    lin(1.0, 0.0, 8.0),
                    lin(1.0, 0.0, 4.5),
                    lin(1.0, 0.0, 4.0),
                    lin(1.0, 0.0, 3.5),
                    lin(1.0, 0.0, 2.0),
                    sig(4.0, 3.0, 0.0),
                    sig(2.5, 1.5, 0.0),
                    sig(2.0, 1.0, 0.0),
                    sig(1.5, 0.5, 0.0),
                ],
            ),
        },
        Suite {
            name: "table5".into(),
            column: Column::ValueRange,
            cases: both(
                20,
                vec![
                    lin(1.0, 0.0, 4.0),
                    lin(1.0, -0.5, 3.5),
                    lin(1.0, -1.0, 3.0),
                    sig(2.0, 1.0, 0.0),
                    sig(2.0, 1.0 / 3.0, -0.5),
                    sig(2.0, 1.0 / 9.0, -0.8),
                ],
            ),
        },
        Suite { name: "table6".into(), column: Column::PassingPoint, cases: passing(20) },
        Suite { name: "table7".into(), column: Column::PassingPoint, cases: passing(32) },
        Suite { name: "table8".into(), column: Column::Position, cases: placement },
    ]
}

pub fn suite(name: &str, scale: Scale) -> Result<Suite> {
    builtin_suites(scale).into_iter().find(|s| s.name == name).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown suite `{name}`; available suites: {}", SUITE_NAMES.join(", ")))
    })
}

/// One training run of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub divergence: Option<Divergence>,
}

impl SeedResult {
    /// Held-out accuracy after the last completed epoch.
    pub fn final_acc(&self) -> Option<f64> {
        self.history.last().map(|r| r.val_acc)
    }

    pub fn best_acc(&self) -> Option<f64> {
        self.history.iter().map(|r| r.val_acc).fold(None, |m, a| Some(m.map_or(a, |m: f64| m.max(a))))
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: AblationCase,
    pub runs: Vec<SeedResult>,
}

impl CaseResult {
    pub fn diverged(&self) -> bool {
        self.runs.iter().any(SeedResult::diverged)
    }

    /// Mean and sample standard deviation of the final accuracies of the
    /// runs that completed at least one epoch.
    pub fn final_acc_stats(&self) -> Option<(f64, f64)> {
        mean_std(self.runs.iter().filter_map(SeedResult::final_acc))
    }

    pub fn best_acc_stats(&self) -> Option<(f64, f64)> {
        mean_std(self.runs.iter().filter_map(SeedResult::best_acc))
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub suite: String,
    pub column: Column,
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub rows: Vec<CaseResult>,
}

impl AblationReport {
    /// `<suite>-<scale>-<seeds>`, seeds joined by `_`.
    pub fn file_stem(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!("{}-{}-{}", self.suite, self.scale, seeds.join("_"))
    }

    /// One line per (case, seed). Accuracies are printed with full precision
    /// so two reports compare bitwise as text.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("suite\tcase\tfamily\tcolumn\tseed\tepochs\tfinal_acc\tbest_acc\tdiverged\n");
        for row in &self.rows {
            for run in &row.runs {
                let acc = |a: Option<f64>| a.map_or_else(|| "nan".to_string(), |a| format!("{a:?}"));
                let div = run
                    .divergence
                    .as_ref()
                    .map_or_else(|| "no".to_string(), |d| format!("epoch {} batch {}: {}", d.epoch, d.batch, d.reason));
                writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    self.suite,
                    row.case.name,
                    row.case.activation.family(),
                    row.case.column_value(self.column),
                    run.seed,
                    run.history.len(),
                    acc(run.final_acc()),
                    acc(run.best_acc()),
                    div
                )
                .unwrap();
            }
        }
        s
    }

    /// Per-epoch curves of every run.
    pub fn history_tsv(&self) -> String {
        let mut s = String::from("case\tseed\tepoch\tlr\ttrain_loss\tval_acc\n");
        for row in &self.rows {
            for run in &row.runs {
                for r in &run.history {
                    writeln!(
                        s,
                        "{}\t{}\t{}\t{:?}\t{:?}\t{:?}",
                        row.case.name, run.seed, r.epoch, r.lr, r.train_loss, r.val_acc
                    )
                    .unwrap();
                }
            }
        }
        s
    }
}

/// Trains every case of `suite` once per seed, in case order. Divergence is
/// an outcome recorded in the report; only data or configuration problems
/// are errors. `on_run` sees each finished run.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    suite: &Suite,
    base: &TrainConfig,
    scale: Scale,
    train: &[LabeledImage],
    test: &[LabeledImage],
    norm: &NormStats,
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationCase, &SeedResult),
) -> Result<AblationReport> {
    suite.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("run_suite needs at least one seed".into()));
    }
    let (train, test) = scale.subset(train, test);
    let mut rows = Vec::with_capacity(suite.cases.len());
    for case in &suite.cases {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut net = build::<f32>(&case.network_config(seed))?;
            let config = TrainConfig { seed, ..scale.train_config(base) };
            let outcome = train_loop(&mut net, train, test, norm, &config, |_| {})?;
            let run = SeedResult { seed, history: outcome.history, divergence: outcome.divergence };
            on_run(case, &run);
            runs.push(run);
        }
        rows.push(CaseResult { case: case.clone(), runs });
    }
    Ok(AblationReport { suite: suite.name.clone(), column: suite.column, scale, seeds: seeds.to_vec(), rows })
}

fn acc_cell(row: &CaseResult) -> String {
    let base = match row.final_acc_stats() {
        None => return "diverged".into(),
        Some((m, s)) if row.runs.len() > 1 => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        Some((m, _)) => format!("{:.2}", 100.0 * m),
    };
    if row.diverged() {
        format!("{base} (diverged)")
    } else {
        base
    }
}

/// Two family blocks side by side: piecewise-linear functions (ReLU
/// included) on the left, sigmoid functions on the right. ReLU rows get an
/// empty right-hand partner.
pub fn render_table(report: &AblationReport) -> String {
    type Cells = [String; 3];
    let cells =
        |r: &CaseResult| -> Cells { [r.case.activation.to_string(), r.case.column_value(report.column), acc_cell(r)] };
    let is_sigmoid = |r: &&CaseResult| matches!(r.case.activation, ActivationSpec::Sigmoid { .. });
    let relu: Vec<&CaseResult> = report.rows.iter().filter(|r| r.case.activation == ActivationSpec::Relu).collect();
    let linear: Vec<&CaseResult> =
        report.rows.iter().filter(|r| matches!(r.case.activation, ActivationSpec::ClippedLinear { .. })).collect();
    let sigmoid: Vec<&CaseResult> = report.rows.iter().filter(is_sigmoid).collect();

    let blank = || -> Cells { Default::default() };
    let mut lines: Vec<(Cells, Cells)> = relu.iter().map(|r| (cells(r), blank())).collect();
    for i in 0..linear.len().max(sigmoid.len()) {
        let l = linear.get(i).map_or_else(blank, |r| cells(r));
        let s = sigmoid.get(i).map_or_else(blank, |r| cells(r));
        lines.push((l, s));
    }

    let titles = ["activate function", report.column.title(), "accuracy(%)"];
    let mut width = [0usize; 6];
    for (k, t) in titles.iter().enumerate() {
        width[k] = t.chars().count();
        width[k + 3] = width[k];
    }
    for (l, s) in &lines {
        for k in 0..3 {
            width[k] = width[k].max(l[k].chars().count());
            width[k + 3] = width[k + 3].max(s[k].chars().count());
        }
    }
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
    let row = |cols: [&str; 6]| -> String {
        let parts: Vec<String> = cols.iter().zip(width).map(|(c, w)| pad(c, w)).collect();
        format!("{}  {}  {} | {}  {}  {}", parts[0], parts[1], parts[2], parts[3], parts[4], parts[5])
            .trim_end()
            .trim_end_matches('|')
            .trim_end()
            .to_string()
    };
    let left_w = width[0] + width[1] + width[2] + 4;
    let mut out = String::new();
    writeln!(out, "{} | mod sigmoid", pad("mod linear", left_w)).unwrap();
    writeln!(out, "{}", row([titles[0], titles[1], titles[2], titles[0], titles[1], titles[2]])).unwrap();
    for (l, s) in &lines {
        writeln!(out, "{}", row([&l[0], &l[1], &l[2], &s[0], &s[1], &s[2]])).unwrap();
    }
    out
}
