//! Seeded synthetic chat corpora with heavy-tailed turn counts and
//! lognormal message lengths.

use super::{
    words_for, PriorityClass, SessionId, SessionScript, Turn, UserProfile, DEFAULT_MODEL_ID,
    DEFAULT_WORDS_PER_TOKEN,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Pareto};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub sessions: usize,
    /// Exactly `round(multi_turn_fraction * sessions)` sessions get ≥2 turns.
    pub multi_turn_fraction: f64,
    /// Pareto shape for the turn count of multi-turn sessions.
    pub turn_alpha: f64,
    pub max_turns: u32,
    pub prompt_median: f64,
    pub prompt_sigma: f64,
    pub response_median: f64,
    pub response_sigma: f64,
    pub max_message_tokens: u32,
    /// Turns are cut once a session would exceed this many tokens; at least
    /// the first two turns of a multi-turn session are always kept.
    pub max_session_tokens: u64,
    pub words_per_token: f64,
    pub reading_wpm: f64,
    pub typing_wpm: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sessions: 1000,
            multi_turn_fraction: 0.734,
            turn_alpha: 1.3,
            max_turns: 64,
            prompt_median: 40.0,
            prompt_sigma: 1.2,
            response_median: 220.0,
            response_sigma: 0.8,
            max_message_tokens: 2048,
            max_session_tokens: 16_384,
            words_per_token: DEFAULT_WORDS_PER_TOKEN,
            reading_wpm: super::DEFAULT_READING_WPM,
            typing_wpm: super::DEFAULT_TYPING_WPM,
        }
    }
}

impl SyntheticSpec {
    pub fn sharegpt_like(sessions: usize) -> Self {
        SyntheticSpec {
            sessions,
            ..Default::default()
        }
    }

    /// Long, heavy-tailed sessions driven by machine-speed clients such as
    /// agent pipelines, so that a small cluster runs close to saturation.
    pub fn heavy_tailed(sessions: usize) -> Self {
        SyntheticSpec {
            sessions,
            multi_turn_fraction: 0.9,
            turn_alpha: 1.1,
            max_turns: 48,
            response_median: 160.0,
            response_sigma: 1.0,
            max_message_tokens: 1024,
            max_session_tokens: 12_288,
            reading_wpm: 30_000.0,
            typing_wpm: 6_000.0,
            ..Default::default()
        }
    }

    pub fn single_turn(sessions: usize) -> Self {
        SyntheticSpec {
            sessions,
            multi_turn_fraction: 0.0,
            ..Default::default()
        }
    }

    pub fn generate(&self, seed: u64) -> Vec<SessionScript> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.sessions;
        let multi = ((self.multi_turn_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let mut is_multi: Vec<bool> = (0..n).map(|i| i < multi).collect();
        is_multi.shuffle(&mut rng);

        let turns_dist = Pareto::new(1.0, self.turn_alpha).expect("valid pareto");
        let prompt = LogNormal::new(self.prompt_median.ln(), self.prompt_sigma).expect("valid");
        let response =
            LogNormal::new(self.response_median.ln(), self.response_sigma).expect("valid");
        let cap = self.max_message_tokens.max(1) as f64;
        let draw = |d: &LogNormal<f64>, rng: &mut ChaCha8Rng| -> u32 {
            d.sample(rng).round().clamp(1.0, cap) as u32
        };

        let max_turns = self.max_turns.max(2);
        let mut out = Vec::with_capacity(n);
        for (i, &multi_turn) in is_multi.iter().enumerate() {
            let want = if multi_turn {
                let extra: f64 = turns_dist.sample(&mut rng);
                (1 + extra.ceil() as u32).clamp(2, max_turns)
            } else {
                1
            };
            let mut turns = Vec::with_capacity(want as usize);
            let mut total = 0u64;
            for k in 0..want {
                let p = draw(&prompt, &mut rng);
                let r = draw(&response, &mut rng);
                let t = p as u64 + r as u64;
                if k >= 2 && total + t > self.max_session_tokens {
                    break;
                }
                total += t;
                turns.push(Turn {
                    prompt_tokens: p,
                    response_tokens: r,
                    prompt_words: words_for(p, self.words_per_token),
                    response_words: words_for(r, self.words_per_token),
                });
            }
            out.push(SessionScript {
                session_id: SessionId::new(format!("s{i:05}")),
                model_id: DEFAULT_MODEL_ID.into(),
                turns,
                user_profile: UserProfile {
                    reading_wpm: self.reading_wpm,
                    typing_wpm: self.typing_wpm,
                },
                priority_class: PriorityClass::Normal,
            });
        }
        out
    }
}
