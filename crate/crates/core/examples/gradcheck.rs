//! Compares analytic gradients of the full training objective with central finite
//! differences on small random problems, with and without an edit head.
//!
//! `cargo run --release -p triplane-edit --example gradcheck -- [problems]`

use triplane_edit::train::{gradient_check, random_check_problem, BlockSet, CheckProblem};
use triplane_edit::EditKind;

fn main() -> triplane_edit::Result<()> {
    let problems: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let kinds = [Some(EditKind::Feature), Some(EditKind::Color), None];
    for seed in 0..problems {
        let edit = kinds[seed as usize % kinds.len()];
        let (field, batch, objective) = random_check_problem(
            &CheckProblem {
                edit,
                ..CheckProblem::default()
            },
            seed,
        )?;
        let report = gradient_check(&field, &batch, &objective, BlockSet::all(), &[1e-3, 1e-4, 1e-5])?;
        println!(
            "seed {seed} edit {:<8} checked {:>5} skipped {} max relative error {:.2e} at {:?}",
            edit.map_or("none", |k| if k == EditKind::Feature { "feature" } else { "color" }),
            report.checked,
            report.skipped,
            report.max_rel_error,
            report.worst
        );
    }
    Ok(())
}
