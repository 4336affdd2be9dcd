use serde::{Deserialize, Serialize};

use super::config::{IntRange, LevelConfig};
use super::level::{generate_constrained, generate_level, Color, Level};
use super::EnvError;
use crate::rng::Rng;

/// Seeds tried per draw before a rejection sampler gives up.
const MAX_REJECTIONS: usize = 1_000;

/// How levels are divided between training and zero-shot testing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Train and test draw from the same distribution.
    #[default]
    None,
    /// Test levels have a solution length taken from `lengths`; training
    /// never produces those lengths.
    LongerSolutions { lengths: Vec<usize> },
    /// Each `[lock, key]` transition is never required on a training
    /// solution path (it may still appear on distractor branches); every
    /// test level requires one of them.
    WithheldPairs { pairs: Vec<[u8; 2]> },
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Any,
    AvoidLengths(Vec<usize>),
    Lengths(Vec<usize>),
    AvoidPairs(Vec<(Color, Color)>),
    RequirePair(Vec<(Color, Color)>),
}

/// Draws levels from a distribution, optionally subject to a withholding
/// rule.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSampler {
    config: LevelConfig,
    rule: Rule,
}

impl LevelSampler {
    /// Unrestricted sampler over `config`.
    pub fn new(config: LevelConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(LevelSampler {
            config,
            rule: Rule::Any,
        })
    }

    pub fn config(&self) -> &LevelConfig {
        &self.config
    }

    /// Draws one level; consumes a seed (and possibly a choice) from `rng`.
    pub fn sample(&self, rng: &mut Rng) -> Result<Level, EnvError> {
        match &self.rule {
            Rule::Any => generate_level(&self.config, rng.next_u64()),
            Rule::Lengths(lengths) => {
                let len = lengths[rng.index(lengths.len())];
                let config = LevelConfig {
                    solution_length: IntRange::exactly(len),
                    ..self.config.clone()
                };
                generate_level(&config, rng.next_u64())
            }
            Rule::RequirePair(pairs) => {
                let pair = pairs[rng.index(pairs.len())];
                generate_constrained(&self.config, rng.next_u64(), Some(pair))
            }
            Rule::AvoidLengths(_) | Rule::AvoidPairs(_) => {
                for _ in 0..MAX_REJECTIONS {
                    let level = generate_level(&self.config, rng.next_u64())?;
                    if self.accepts(&level) {
                        return Ok(level);
                    }
                }
                Err(EnvError::InfeasibleSplit(format!(
                    "no acceptable level in {MAX_REJECTIONS} draws"
                )))
            }
        }
    }

    /// Level for a fixed evaluation seed.
    pub fn sample_seeded(&self, seed: u64) -> Result<Level, EnvError> {
        self.sample(&mut Rng::new(seed))
    }

    /// Whether `level` belongs to this sampler's side of the split.
    pub fn accepts(&self, level: &Level) -> bool {
        let len = level.solution_length();
        let has_pair = |pairs: &[(Color, Color)]| {
            level
                .graph()
                .solution_transitions()
                .any(|t| pairs.contains(&t))
        };
        match &self.rule {
            Rule::Any => true,
            Rule::AvoidLengths(l) => !l.contains(&len),
            Rule::Lengths(l) => l.contains(&len),
            Rule::AvoidPairs(p) => !has_pair(p),
            Rule::RequirePair(p) => has_pair(p),
        }
    }
}

/// Builds the `(train, test)` samplers for a split.
pub fn make_split(
    config: &LevelConfig,
    spec: &SplitSpec,
) -> Result<(LevelSampler, LevelSampler), EnvError> {
    config.validate()?;
    let with = |rule| LevelSampler {
        config: config.clone(),
        rule,
    };
    let infeasible = |msg: String| Err(EnvError::InfeasibleSplit(msg));
    let (train, test) = match spec {
        SplitSpec::None => (with(Rule::Any), with(Rule::Any)),
        SplitSpec::LongerSolutions { lengths } => {
            if lengths.is_empty() {
                return infeasible("no test lengths given".into());
            }
            for &len in lengths {
                let test_cfg = LevelConfig {
                    solution_length: IntRange::exactly(len),
                    ..config.clone()
                };
                test_cfg
                    .validate()
                    .map_err(|e| EnvError::InfeasibleSplit(format!("length {len}: {e}")))?;
            }
            let sol = config.solution_length;
            if (sol.lo..=sol.hi).all(|l| lengths.contains(&l)) {
                return infeasible("every training length is withheld".into());
            }
            let mut test_lengths = lengths.clone();
            test_lengths.sort_unstable();
            test_lengths.dedup();
            (
                with(Rule::AvoidLengths(test_lengths.clone())),
                with(Rule::Lengths(test_lengths)),
            )
        }
        SplitSpec::WithheldPairs { pairs } => {
            if pairs.is_empty() {
                return infeasible("no withheld pairs given".into());
            }
            let mut parsed = Vec::with_capacity(pairs.len());
            for &[a, b] in pairs {
                if a == b || a as usize >= config.num_colors || b as usize >= config.num_colors {
                    return infeasible(format!("invalid pair [{a}, {b}]"));
                }
                parsed.push((Color(a), Color(b)));
            }
            if config.solution_length.hi < 2 {
                return infeasible("test levels need solution length >= 2".into());
            }
            (
                with(Rule::AvoidPairs(parsed.clone())),
                with(Rule::RequirePair(parsed)),
            )
        }
    };
    // Probe both sides so impossible rules surface here rather than mid-run.
    let mut rng = Rng::stream(0x5eed, 0);
    for _ in 0..8 {
        train.sample(&mut rng)?;
        test.sample(&mut rng)?;
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longer_solutions_split() {
        let config = LevelConfig::default();
        let spec = SplitSpec::LongerSolutions {
            lengths: vec![6, 8, 10],
        };
        let (train, test) = make_split(&config, &spec).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let l = test.sample(&mut rng).unwrap();
            assert!([6, 8, 10].contains(&l.solution_length()));
            let l = train.sample(&mut rng).unwrap();
            assert!((1..=4).contains(&l.solution_length()));
        }
    }

    #[test]
    fn empty_spec_is_the_same_distribution() {
        let config = LevelConfig::default();
        let (train, test) = make_split(&config, &SplitSpec::None).unwrap();
        assert_eq!(train, test);
        let a = train.sample(&mut Rng::new(3)).unwrap();
        let b = test.sample(&mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_specs() {
        let config = LevelConfig::default();
        let bad = [
            SplitSpec::WithheldPairs { pairs: vec![] },
            SplitSpec::WithheldPairs {
                pairs: vec![[3, 3]],
            },
            SplitSpec::WithheldPairs {
                pairs: vec![[0, 25]],
            },
            SplitSpec::LongerSolutions {
                lengths: vec![1, 2, 3, 4],
            },
        ];
        for spec in bad {
            assert!(
                matches!(make_split(&config, &spec), Err(EnvError::InfeasibleSplit(_))),
                "{spec:?}"
            );
        }
        let short = LevelConfig {
            solution_length: IntRange::exactly(1),
            ..config
        };
        let spec = SplitSpec::WithheldPairs {
            pairs: vec![[0, 1]],
        };
        assert!(matches!(
            make_split(&short, &spec),
            Err(EnvError::InfeasibleSplit(_))
        ));
    }

    #[test]
    fn split_spec_toml() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            split: SplitSpec,
        }
        let w: Wrap = toml::from_str("[split]\nkind = \"withheld_pairs\"\npairs = [[1, 2]]\n").unwrap();
        assert_eq!(
            w.split,
            SplitSpec::WithheldPairs {
                pairs: vec![[1, 2]]
            }
        );
    }
}
