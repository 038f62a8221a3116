#![allow(dead_code)]

use std::collections::HashSet;

use dynaprompt::buffer::PromptBuffer;
use dynaprompt::{Prompt, PromptScore};
use rand::Rng;

/// Ids passing both thresholds, by direct evaluation in slot order.
pub fn brute_force_select(slot_ids: &[u64], scores: &[PromptScore], v0: &PromptScore) -> Vec<u64> {
    let mut out = Vec::new();
    for &id in slot_ids {
        for s in scores {
            if s.prompt_id == id && s.d_ent <= v0.d_ent && s.d_pro >= v0.d_pro {
                out.push(id);
                break;
            }
        }
    }
    out
}

/// Draws metric values from a coarse grid so ties with the reference are common.
pub fn random_score<R: Rng>(rng: &mut R, prompt_id: u64) -> PromptScore {
    let grid = |rng: &mut R| f64::from(rng.random_range(0..6u8)) / 5.0;
    let d_ent = grid(rng);
    let d_pro = grid(rng) - 0.5;
    PromptScore {
        prompt_id,
        d_ent,
        d_pro,
        pseudo_label: rng.random_range(0..10),
    }
}

/// Scores for a random subset of the slots (usually all of them).
pub fn random_scores<R: Rng>(rng: &mut R, slot_ids: &[u64]) -> Vec<PromptScore> {
    let mut out = Vec::new();
    for &id in slot_ids {
        if rng.random::<f64>() > 0.05 {
            out.push(random_score(rng, id));
        }
    }
    out
}

fn random_prompt<R: Rng>(rng: &mut R, id: u64, n: usize, d: usize) -> Prompt {
    let tokens = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Prompt::from_tokens(id, tokens).unwrap()
}

/// Drives `cycles` random select/commit cycles through a buffer of capacity
/// `m`, checking every invariant after each commit.
pub fn buffer_cycles<R: Rng>(rng: &mut R, m: usize, cycles: u64) -> Result<(), String> {
    let template = random_prompt(rng, 0, 2, 3);
    let pristine = template.clone();
    let mut buf = PromptBuffer::new(m, template).map_err(|e| e.to_string())?;
    let mut max_id_seen = 0u64;

    for step in 0..cycles {
        buf.set_step(step);
        // an occasional deletion outside the working set
        if !buf.is_empty() && rng.random::<f64>() < 0.05 {
            let victim = buf.slots()[rng.random_range(0..buf.len())].id;
            buf.remove(victim);
        }
        let before: Vec<u64> = buf.slots().iter().map(|p| p.id).collect();
        let v0 = random_score(rng, 0);
        let scores = random_scores(rng, &before);
        let selection = buf.select(&scores, &v0);
        let expected = brute_force_select(&before, &scores, &v0);
        if selection.selected_ids != expected {
            return Err(format!(
                "step {step}: selected {:?}, expected {expected:?}",
                selection.selected_ids
            ));
        }
        if selection.appended_fresh != expected.is_empty() {
            return Err(format!("step {step}: appended_fresh inconsistent"));
        }

        let working = buf.working_set(&selection);
        if selection.appended_fresh {
            let fresh = &working[0];
            if working.len() != 1 || !fresh.same_tokens(&pristine) {
                return Err(format!("step {step}: fresh copy differs from the template"));
            }
            if fresh.id <= max_id_seen || before.contains(&fresh.id) {
                return Err(format!("step {step}: fresh id {} reused", fresh.id));
            }
        } else if working.iter().map(|p| p.id).collect::<Vec<_>>() != expected {
            return Err(format!("step {step}: working set out of slot order"));
        }

        // stand-in for the joint update: perturb, stamp, sometimes degenerate
        let mut updated = Vec::new();
        for mut p in working {
            max_id_seen = max_id_seen.max(p.id);
            for t in p.tokens.iter_mut().flatten() {
                *t += rng.random_range(-0.1..0.1);
            }
            p.last_active_step = step;
            if rng.random::<f64>() > 0.05 {
                updated.push(p);
            }
        }
        let updated_ids: Vec<u64> = updated.iter().map(|p| p.id).collect();
        let was_full = buf.is_full();
        let report = buf.commit(&selection, updated);
        let after: Vec<u64> = buf.slots().iter().map(|p| p.id).collect();

        if after.len() > m {
            return Err(format!("step {step}: {} prompts exceed capacity {m}", after.len()));
        }
        if after.iter().collect::<HashSet<_>>().len() != after.len() {
            return Err(format!("step {step}: duplicate ids {after:?}"));
        }
        if buf
            .slots()
            .windows(2)
            .any(|w| w[0].last_active_step < w[1].last_active_step)
        {
            return Err(format!("step {step}: recency order violated"));
        }
        if after[..updated_ids.len()] != updated_ids[..] {
            return Err(format!("step {step}: updated prompts not on top"));
        }
        // survivors keep their relative order
        let gone: HashSet<u64> = expected.iter().copied().chain(report.evicted).collect();
        let survivors: Vec<u64> = before.iter().copied().filter(|id| !gone.contains(id)).collect();
        if after[updated_ids.len()..] != survivors[..] {
            return Err(format!("step {step}: untouched prompts reordered"));
        }
        // evictions only when a fresh prompt met a full buffer, and always the bottom slot
        let should_evict = selection.appended_fresh && was_full && !updated_ids.is_empty();
        if report.evicted != should_evict.then(|| *before.last().unwrap()) {
            return Err(format!("step {step}: eviction {:?} unexpected", report.evicted));
        }
        if !buf.v0_template().same_tokens(&pristine) {
            return Err(format!("step {step}: template mutated"));
        }
    }
    Ok(())
}
