// temporary closed-loop probe, deleted once the harness lands
use pickline::cagent::{recommend_speed, CAgentConfig};
use pickline::line::*;
use pickline::strip::{derive_length, LengthModel, Strip};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn strip_of(rng: &mut StdRng) -> Strip {
    let w = rng.gen_range(1000..1600);
    let t = rng.gen_range(200..450);
    let kg = rng.gen_range(12000..28000);
    Strip {
        grade: 0,
        original_width: w,
        resulting_width: w - rng.gen_range(0..10),
        thickness: t,
        weight: kg,
        coiling_temperature: 620.0,
        strips_in_coil: 1.0,
        length: derive_length(w, t, kg, &LengthModel::default()),
    }
}

#[test]
fn probe_cagent_closed_loop() {
    for &(pred_sd, label) in &[(0.0, "sd=0"), (10.0, "sd=10")] {
        let mut deaths = 0;
        let mut total_speed = 0.0;
        let mut total_steps = 0u64;
        let mut durations = Vec::new();
        let mut rng = StdRng::seed_from_u64(999);
        let n = 30;
        for ep in 0..n {
            let queue: Vec<Strip> = (0..20).map(|_| strip_of(&mut rng)).collect();
            let caps = vec![(30.0, 220.0); 20];
            let ic = InitialConditions {
                v1: rng.gen_range(120.0..350.0),
                v2: rng.gen_range(35.0..120.0),
                stu_speed: rng.gen_range(60.0..180.0),
                ftu: if rng.gen_bool(0.8) {
                    FtuInit::Unrolling { progress: rng.gen_range(0.0..0.7) }
                } else {
                    FtuInit::Welding { remaining_frac: rng.gen_range(0.2..1.0) }
                },
                ttu: if rng.gen_bool(0.85) { TtuInit::Recoiling } else { TtuInit::Cutting { remaining_frac: rng.gen_range(0.2..1.0) } },
            };
            let d = DisturbanceModel { prediction_sd: pred_sd, seed: 5000 + ep, ..DisturbanceModel::default() };
            let mut state = match LineState::reset(LineConfig::default(), queue, caps, ic, &d) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let cfg = CAgentConfig::default();
            let mut steps = 0u64;
            loop {
                if let Some(cause) = state.terminal() {
                    if cause == TerminalCause::Death {
                        deaths += 1;
                    }
                    durations.push(steps);
                    break;
                }
                let cmd = recommend_speed(&state, &cfg);
                let rec = state.step(cmd).unwrap();
                total_speed += rec.stu_speed;
                total_steps += 1;
                steps += 1;
                if steps > 100_000 { panic!("runaway episode"); }
            }
        }
        println!(
            "{label}: deaths {deaths}/{n}, mean stu speed {:.1}, mean duration {:.0} s",
            total_speed / total_steps as f64,
            durations.iter().sum::<u64>() as f64 / durations.len() as f64
        );
    }
}
