//! Attention cost accounting in exact integers.
//!
//! A pass over `T'` tokens costs `T'²·E` score multiply-adds and holds a
//! `B·h·T'²` float32 score tensor.

use std::fmt::Write;

/// `count` block passes over `tokens` tokens each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassGroup {
    pub count: u64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub passes: Vec<PassGroup>,
    pub embed: u64,
    pub batch: u64,
    pub heads: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupCost {
    pub group: PassGroup,
    pub work_per_pass: u64,
    pub memory_per_pass: u64,
    pub work: u64,
    pub memory: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub groups: Vec<GroupCost>,
    pub total_work: u64,
    /// Score memory summed over every pass, in bytes.
    pub total_memory: u64,
}

pub fn work_per_pass(tokens: u64, embed: u64) -> u64 {
    tokens * tokens * embed
}

pub fn memory_per_pass(tokens: u64, batch: u64, heads: u64) -> u64 {
    batch * heads * tokens * tokens * 4
}

pub fn cost_model(schedule: &Schedule) -> CostReport {
    let groups: Vec<GroupCost> = schedule
        .passes
        .iter()
        .map(|&group| {
            let w = work_per_pass(group.tokens, schedule.embed);
            let m = memory_per_pass(group.tokens, schedule.batch, schedule.heads);
            GroupCost {
                group,
                work_per_pass: w,
                memory_per_pass: m,
                work: group.count * w,
                memory: group.count * m,
            }
        })
        .collect();
    CostReport {
        total_work: groups.iter().map(|g| g.work).sum(),
        total_memory: groups.iter().map(|g| g.memory).sum(),
        groups,
    }
}

/// Model geometry for the baseline-vs-fusion comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// Number of fusing blocks N (2N ViT blocks).
    pub depth: u64,
    pub tokens: u64,
    pub embed: u64,
    pub batch: u64,
    pub heads: u64,
}

impl Geometry {
    /// E=512, h=8, N=4, B=128, T=198.
    pub fn full() -> Self {
        Geometry {
            depth: 4,
            tokens: 198,
            embed: 512,
            batch: 128,
            heads: 8,
        }
    }

    fn schedule(&self, passes: Vec<PassGroup>) -> Schedule {
        Schedule {
            passes,
            embed: self.embed,
            batch: self.batch,
            heads: self.heads,
        }
    }

    /// Two branches through 2N unfused blocks: `4N` passes at `T`.
    pub fn baseline(&self) -> Schedule {
        self.schedule(vec![PassGroup {
            count: 4 * self.depth,
            tokens: self.tokens,
        }])
    }

    /// N shared blocks on each branch plus N fused blocks at `2T`. With
    /// `count_shared_once`, the two branch passes of a shared block count as
    /// one.
    pub fn fused(&self, count_shared_once: bool) -> Schedule {
        let branch = if count_shared_once { self.depth } else { 2 * self.depth };
        self.schedule(vec![
            PassGroup {
                count: branch,
                tokens: self.tokens,
            },
            PassGroup {
                count: self.depth,
                tokens: 2 * self.tokens,
            },
        ])
    }
}

/// Baseline and fused totals with the overhead as an exact fraction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostComparison {
    pub geometry: Geometry,
    pub count_shared_once: bool,
    pub baseline: CostReport,
    pub fused: CostReport,
    /// Extra score memory of the fused blocks over the same blocks at `T`:
    /// `N·B·h·((2T)² − T²)·4` bytes.
    pub extra_fused_memory: u64,
}

/// Overhead the published comparison quotes for N=4, T=198, E=512.
pub const TARGET_OVERHEAD_PERCENT: u64 = 25;
/// Extra memory the published comparison quotes, in GB.
pub const TARGET_EXTRA_MEMORY_GB: f64 = 1.8;

impl CostComparison {
    pub fn new(geometry: Geometry, count_shared_once: bool) -> Self {
        let g = geometry;
        let (t, t2) = (g.tokens, 2 * g.tokens);
        CostComparison {
            geometry,
            count_shared_once,
            baseline: cost_model(&g.baseline()),
            fused: cost_model(&g.fused(count_shared_once)),
            extra_fused_memory: g.depth * (memory_per_pass(t2, g.batch, g.heads) - memory_per_pass(t, g.batch, g.heads)),
        }
    }

    /// `(fused − baseline, baseline)` work.
    pub fn overhead_fraction(&self) -> (i128, i128) {
        (
            self.fused.total_work as i128 - self.baseline.total_work as i128,
            self.baseline.total_work as i128,
        )
    }

    /// Overhead in percent when it is a whole number.
    pub fn overhead_percent_exact(&self) -> Option<i128> {
        let (num, den) = self.overhead_fraction();
        (num * 100 % den == 0).then_some(num * 100 / den)
    }

    pub fn overhead_ratio(&self) -> f64 {
        let (num, den) = self.overhead_fraction();
        num as f64 / den as f64
    }

    /// Which counting convention produces the target 25% overhead.
    pub fn matching_convention(geometry: Geometry) -> Option<bool> {
        [false, true]
            .into_iter()
            .find(|&once| CostComparison::new(geometry, once).overhead_percent_exact() == Some(TARGET_OVERHEAD_PERCENT as i128))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let g = self.geometry;
        writeln!(
            s,
            "geometry: N={} T={} E={} B={} h={}",
            g.depth, g.tokens, g.embed, g.batch, g.heads
        )
        .unwrap();
        writeln!(s, "count_shared_once={}", self.count_shared_once).unwrap();
        for (label, report) in [("baseline", &self.baseline), ("fused", &self.fused)] {
            for gc in &report.groups {
                writeln!(
                    s,
                    "{label}: {} passes at T'={}: work/pass={} memory/pass={} bytes work={}",
                    gc.group.count, gc.group.tokens, gc.work_per_pass, gc.memory_per_pass, gc.work
                )
                .unwrap();
            }
            writeln!(s, "{label}_total_work={}", report.total_work).unwrap();
        }
        let (num, den) = self.overhead_fraction();
        writeln!(s, "overhead={num}/{den} ({:.2}%)", 100.0 * self.overhead_ratio()).unwrap();
        writeln!(
            s,
            "extra_fused_memory={} bytes ({:.3} GiB, {:.3} GB)",
            self.extra_fused_memory,
            self.extra_fused_memory as f64 / (1u64 << 30) as f64,
            self.extra_fused_memory as f64 / 1e9
        )
        .unwrap();
        writeln!(
            s,
            "target: +{TARGET_OVERHEAD_PERCENT}% work, roughly {TARGET_EXTRA_MEMORY_GB} GB extra memory (annotation)"
        )
        .unwrap();
        let verdict = match CostComparison::matching_convention(g) {
            Some(true) => "count_shared_once=true",
            Some(false) => "count_shared_once=false",
            None => "neither convention",
        };
        writeln!(s, "convention reproducing +{TARGET_OVERHEAD_PERCENT}%: {verdict}").unwrap();
        s
    }
}
