//! Runs one synthetic workload and prints its access-time breakdown.
//!
//! ```text
//! cargo run --release --example workload -- <tasks> <mean_ms> <workers> <threads> [centralized] [query_ms]
//! ```

use schaladb::harness::{run_workload, Mode, WorkloadSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 4 {
        eprintln!("usage: workload <tasks> <mean_ms> <workers> <threads> [centralized] [query_ms]");
        std::process::exit(2);
    }
    let num = |i: usize| -> u64 {
        args[i].parse().unwrap_or_else(|_| {
            eprintln!("not a number: {}", args[i]);
            std::process::exit(2)
        })
    };
    let mut spec = WorkloadSpec::new(num(0), num(1), num(2) as u32, num(3) as u32);
    if args.get(4).is_some_and(|a| a == "centralized") {
        spec.mode = Mode::Centralized;
    }
    if args.len() > 5 {
        spec.query_interval_ms = Some(num(5)).filter(|q| *q > 0);
    }
    let report = run_workload(&spec).unwrap_or_else(|e| {
        eprintln!("run failed: {e}");
        std::process::exit(1)
    });
    let m = &report.metrics;
    println!(
        "elapsed {:.0} ms, access max-sum {:.0} ms ({:.1}%), largest {:?}, all finished {}, anomalies {}",
        m.elapsed_ms,
        m.access_ms_maxsum,
        100.0 * m.access_fraction,
        m.largest_category(),
        report.all_finished(),
        report.execution_anomalies().len()
    );
    for (cat, pct) in &m.breakdown_pct {
        println!("  {:<14} {:>5.1}%  ({} calls)", cat.as_str(), pct, m.category_calls.get(cat).unwrap_or(&0));
    }
}
