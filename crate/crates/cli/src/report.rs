use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use coach_core::domain::DialogueAction;
use coach_core::sim::StudyReport;

use crate::plot;

/// Writes the study tables, summary text and reward-trend plot.
pub fn export(report: &StudyReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let put = |name: &str, text: &str| std::fs::write(out.join(name), text).with_context(|| format!("writing {name}"));
    put("sessions.csv", &report.session_table_csv())?;
    put("pooled.csv", &report.pooled_table_csv())?;
    let summary = summary_text(report);
    put("summary.txt", &summary)?;
    plot::reward_trend(report, &out.join("reward_trend.svg"))?;
    print!("{summary}");
    Ok(())
}

pub fn summary_text(report: &StudyReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "study: {} replications x {} coachees x {} sessions, generic policy from {}",
        c.replications, c.coachees, c.sessions, report.policy_corpus
    );
    if let Some(cs) = report.corpus_stats {
        let _ = writeln!(s, "corpus reward: mean {:.3} std {:.3} (n = {})", cs.mean, cs.std, cs.count);
    }
    for arm in &report.arms {
        let _ = writeln!(s, "{}:", arm.arm.name());
        for st in &arm.sessions {
            let _ = writeln!(s, "  session {}: mean {:+.3} std {:.3} n {}", st.session, st.mean, st.std, st.n);
        }
        if let (Some(m), Some(se)) = (arm.mean_slope, arm.slope_std_error) {
            let _ = writeln!(s, "  slope per session: {m:+.3} (se {se:.3})");
        }
        let names: Vec<&str> = DialogueAction::ALL.iter().map(|a| a.name()).collect();
        for (i, counts) in arm.action_counts.iter().enumerate() {
            let parts: Vec<String> = names.iter().zip(counts).map(|(n, c)| format!("{n} {c}")).collect();
            let _ = writeln!(s, "  actions session {}: {}", i + 1, parts.join(", "));
        }
    }
    if let Some(t) = report.adaptive_late_vs_early {
        let _ = writeln!(
            s,
            "adaptive last vs second session: {} wins, {} losses, {} ties, one-sided sign test p = {:.3e}",
            t.wins, t.losses, t.ties, t.p_value
        );
    }
    if let Some(share) = report.adaptive_beats_generic_last {
        let _ = writeln!(s, "adaptive beats generic on the last session in {:.0}% of replications", share * 100.0);
    }
    if !report.errors.is_empty() {
        let _ = writeln!(s, "{} session errors", report.errors.len());
    }
    s
}
