//! Scripted fixtures: small corpora paired with rule sets for the scripted
//! backend. Tests, benches and the CLI's demo data are built from these.
//!
//! Rules key on a phrase unique to each prompt template, so one rule set can
//! serve every call of a run. Instance rules come first, the shared fallbacks
//! from [`default_rules`] last.

use rand::Rng;

use crate::chain::NO_INFO_SENTINEL;
use crate::lm::{RuleSet, ScriptRule, ScriptedBackend};
use crate::prompts::{TaskDescription, TaskTable};
use crate::retrieval::{Bm25Index, Document, RetrievalError};
use crate::sampler::QAInstance;
use crate::seeds;

/// Phrase that only the sub-query prompt contains.
pub const SUBQUERY_MARK: &str = "generate a new simple follow-up question";
/// Phrase that only the sub-answer prompt contains.
pub const SUBANSWER_MARK: &str = "DO NOT hallucinate";
/// Phrase that only the final-answer prompt contains.
pub const FINAL_MARK: &str = "generate a final answer for the main query";
/// Phrase that only the stop prompt contains.
pub const STOP_MARK: &str = "judge whether you have enough information";

/// Per-token logprob of the sentinel when the documents did not help.
pub const SENTINEL_LIKELY_LOGPROB: f64 = -0.01;
/// Per-token logprob of the sentinel when the documents answered the sub-query.
pub const SENTINEL_UNLIKELY_LOGPROB: f64 = -3.0;
/// Per-token logprob of any final answer without a more specific rule.
pub const DEFAULT_ANSWER_LOGPROB: f64 = -2.0;

const DATASET: &str = "hotpotqa";

/// Fallback rules appended after every scenario's own rules.
pub fn default_rules() -> Vec<ScriptRule> {
    vec![
        ScriptRule::on(STOP_MARK)
            .logit("Yes", -2.0)
            .logit("No", 0.0),
        ScriptRule::on(SUBANSWER_MARK)
            .output(NO_INFO_SENTINEL)
            .logprob(SENTINEL_LIKELY_LOGPROB),
        ScriptRule::on(SUBQUERY_MARK).output("What else is known about the main query? ({nonce})"),
        ScriptRule::on(FINAL_MARK)
            .output("unknown")
            .logprob(DEFAULT_ANSWER_LOGPROB),
        ScriptRule::on("").output(NO_INFO_SENTINEL).logprob(-1.0),
    ]
}

/// A corpus, QA instances over it, and the instance-specific rules.
#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub corpus: Vec<Document>,
    pub instances: Vec<QAInstance>,
    pub rules: Vec<ScriptRule>,
}

impl Scenario {
    /// Concatenates scenarios; ids must not collide.
    pub fn combine(parts: impl IntoIterator<Item = Scenario>) -> Scenario {
        let mut out = Scenario::default();
        for p in parts {
            out.corpus.extend(p.corpus);
            out.instances.extend(p.instances);
            out.rules.extend(p.rules);
        }
        out
    }

    /// Instance rules followed by the shared fallbacks.
    pub fn rule_set(&self) -> RuleSet {
        let mut rules = self.rules.clone();
        rules.extend(default_rules());
        RuleSet::new(rules).expect("fallbacks include a default rule")
    }

    pub fn backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.rule_set())
    }

    pub fn index(&self) -> Result<Bm25Index, RetrievalError> {
        Bm25Index::build(self.corpus.clone())
    }

    pub fn task(&self) -> TaskDescription {
        TaskTable::builtin()
            .resolve(DATASET)
            .expect("bundled table has hotpotqa")
    }

    pub fn instance(&self) -> &QAInstance {
        &self.instances[0]
    }

    /// Rule set as JSON, the format the CLI loads.
    pub fn rules_json(&self) -> String {
        self.rule_set().to_json()
    }

    pub fn corpus_jsonl(&self) -> String {
        jsonl(&self.corpus)
    }

    pub fn dataset_jsonl(&self) -> String {
        jsonl(&self.instances)
    }
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("serializable") + "\n")
        .collect()
}

fn sub_query_block(q: &str) -> String {
    format!("## Query\n{q}")
}

fn history_answer(step: usize, answer: &str) -> String {
    format!("Intermediate answer {step}: {answer}\n")
}

pub const MJALLBY_QUERY: &str = "How many months apart are Johan Mjällby and Neil Lennon in age?";
pub const MJALLBY_SUB_QUERIES: [&str; 3] = [
    "What is Johan Mjällby's birthdate?",
    "What is Neil Lennon's birthdate?",
    "What is the difference in months between 9 February 1971 and 25 June 1971?",
];
pub const MJALLBY_SUB_ANSWERS: [&str; 3] = ["9 February 1971", "25 June 1971", "4 months"];
/// Answer given without any intermediate retrieval.
pub const MJALLBY_NAIVE_ANSWER: &str = "two months";

/// Two birthdates, then their difference. After the third step the model
/// repeats the difference question, so chains end after three steps.
pub fn mjallby() -> Scenario {
    let doc = |id: &str, title: &str, text: &str| Document::new(id, title, text);
    let corpus = vec![
        doc(
            "mjallby",
            "Johan Mjällby",
            "Johan Mjällby (born 9 February 1971) is a Swedish former footballer who played as a defender for AIK and Celtic.",
        ),
        doc(
            "lennon",
            "Neil Lennon",
            "Neil Francis Lennon (born 25 June 1971) is a Northern Irish football manager and former player.",
        ),
        doc(
            "celtic",
            "Celtic F.C.",
            "Celtic Football Club is a Scottish professional football club based in Glasgow. Johan Mjällby and Neil Lennon were team-mates at Celtic.",
        ),
        doc(
            "months",
            "Month",
            "A month is a unit of time used with calendars. The months between February and June are March, April and May.",
        ),
        doc(
            "aik",
            "AIK Fotboll",
            "AIK Fotboll is a Swedish professional football club based in Solna, Stockholm.",
        ),
        doc(
            "leicester",
            "Leicester City F.C.",
            "Leicester City Football Club is an English professional football club. Neil Lennon played for Leicester before joining Celtic.",
        ),
    ];
    let [q1, q2, q3] = MJALLBY_SUB_QUERIES;
    let [a1, a2, a3] = MJALLBY_SUB_ANSWERS;
    let rules = vec![
        ScriptRule::on(SUBQUERY_MARK)
            .requiring("Mjällby and Neil Lennon")
            .requiring(format!("Intermediate query 2: {q2}"))
            .output(q3),
        ScriptRule::on(SUBQUERY_MARK)
            .requiring("Mjällby and Neil Lennon")
            .requiring(format!("Intermediate query 1: {q1}"))
            .output(q2),
        ScriptRule::on(SUBQUERY_MARK)
            .requiring("Mjällby and Neil Lennon")
            .output(q1),
        ScriptRule::on(SUBANSWER_MARK)
            .requiring(sub_query_block(q1))
            .requiring("born 9 February 1971")
            .output(a1)
            .logprob(SENTINEL_UNLIKELY_LOGPROB),
        ScriptRule::on(SUBANSWER_MARK)
            .requiring(sub_query_block(q2))
            .requiring("born 25 June 1971")
            .output(a2)
            .logprob(SENTINEL_UNLIKELY_LOGPROB),
        ScriptRule::on(SUBANSWER_MARK)
            .requiring(sub_query_block(q3))
            .output(a3)
            .logprob(SENTINEL_UNLIKELY_LOGPROB),
        ScriptRule::on(FINAL_MARK)
            .requiring("Mjällby and Neil Lennon")
            .requiring(history_answer(3, a3))
            .output("4")
            .logprob(-0.01),
        ScriptRule::on(FINAL_MARK)
            .requiring("Mjällby and Neil Lennon")
            .output(MJALLBY_NAIVE_ANSWER)
            .logprob(-1.5),
    ];
    Scenario {
        corpus,
        instances: vec![QAInstance::new(MJALLBY_QUERY, "4", DATASET)],
        rules,
    }
}

/// Shape of a synthetic "mentor of the mentor of ..." question.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHop {
    /// Distinguishes entities of different instances in a shared corpus.
    pub id: u32,
    /// Number of lookups needed to reach the answer.
    pub hops: usize,
    /// Append a random tag to every sub-query so siblings never collide.
    pub tagged_sub_queries: bool,
    /// Weight of an uninformative sub-query relative to the informative one
    /// (weight 1). `None` means the informative sub-query is always produced.
    pub distractor_weight: Option<f64>,
    /// Yes-logit of the stop check after `j` steps is `base + slope * j`.
    pub stop_logits: Option<(f64, f64)>,
}

impl MultiHop {
    pub fn new(id: u32, hops: usize) -> Self {
        Self {
            id,
            hops,
            tagged_sub_queries: false,
            distractor_weight: None,
            stop_logits: None,
        }
    }

    pub fn tagged(mut self) -> Self {
        self.tagged_sub_queries = true;
        self
    }

    pub fn with_distractors(mut self, weight: f64) -> Self {
        self.distractor_weight = Some(weight);
        self
    }

    pub fn with_stop_logits(mut self, base: f64, slope: f64) -> Self {
        self.stop_logits = Some((base, slope));
        self
    }

    /// Entity `j` of the mentor chain; fixed width so no name is a prefix of another.
    pub fn entity(&self, j: usize) -> String {
        format!("E{:05}N{:02}", self.id, j)
    }

    pub fn query(&self) -> String {
        format!(
            "Who is the {}of {}?",
            "mentor of the ".repeat(self.hops.saturating_sub(1)) + "mentor ",
            self.entity(0)
        )
    }

    pub fn answer(&self) -> String {
        self.entity(self.hops)
    }

    /// The informative sub-query asked once `j` lookups are done.
    pub fn lookup_query(&self, j: usize) -> String {
        format!("Who is the mentor of {}?", self.entity(j))
    }

    fn fact(&self, j: usize) -> String {
        format!("{} trained under {}", self.entity(j), self.entity(j + 1))
    }

    fn tag(&self, q: String) -> String {
        if self.tagged_sub_queries {
            format!("{q} (ref {{nonce}})")
        } else {
            q
        }
    }

    pub fn build(&self) -> Scenario {
        let mut corpus = Vec::new();
        for j in 0..self.hops {
            corpus.push(Document::new(
                format!("{}-fact-{j}", self.id),
                self.entity(j),
                format!(
                    "{}, who was the mentor of {} for many years.",
                    self.fact(j),
                    self.entity(j)
                ),
            ));
        }
        for j in 0..=self.hops {
            corpus.push(Document::new(
                format!("{}-bio-{j}", self.id),
                self.entity(j),
                format!(
                    "{} was born in a small town and studied music.",
                    self.entity(j)
                ),
            ));
        }

        let main = format!("{}?", self.entity(0));
        let mut rules = Vec::new();

        // Sub-query generation, most advanced history first.
        let after_last = format!("What else is known about {}?", self.entity(self.hops));
        rules.push(
            ScriptRule::on(SUBQUERY_MARK)
                .requiring(main.clone())
                .requiring(history_answer(self.hops, &self.entity(self.hops)))
                .output(format!("{after_last} ({{nonce}})")),
        );
        for j in (0..self.hops).rev() {
            let mut rule = ScriptRule::on(SUBQUERY_MARK).requiring(main.clone());
            if j > 0 {
                rule = rule.requiring(history_answer(j, &self.entity(j)));
            }
            let informative = self.tag(self.lookup_query(j));
            rule = match self.distractor_weight {
                Some(w) => rule.alternative(informative, 1.0).alternative(
                    format!(
                        "What is the favorite color of {}? ({{nonce}})",
                        self.entity(j)
                    ),
                    w,
                ),
                None => rule.output(informative),
            };
            rules.push(rule);
        }

        // Sub-answers: the lookup succeeds only if the fact was retrieved.
        for j in 0..self.hops {
            rules.push(
                ScriptRule::on(SUBANSWER_MARK)
                    .requiring(sub_query_block(&self.lookup_query(j)))
                    .requiring(self.fact(j))
                    .output(self.entity(j + 1))
                    .logprob(SENTINEL_UNLIKELY_LOGPROB),
            );
        }

        if let Some((base, slope)) = self.stop_logits {
            for j in (1..=self.hops + 12).rev() {
                rules.push(
                    ScriptRule::on(STOP_MARK)
                        .requiring(main.clone())
                        .requiring(format!("Intermediate answer {j}: "))
                        .logit("Yes", base + slope * j as f64)
                        .logit("No", 0.0),
                );
            }
        }

        rules.push(
            ScriptRule::on(FINAL_MARK)
                .requiring(main.clone())
                .requiring(history_answer(self.hops, &self.answer()))
                .output(self.answer())
                .logprob(-0.02),
        );
        rules.push(
            ScriptRule::on(FINAL_MARK)
                .requiring(main)
                .output(self.entity(0))
                .logprob(DEFAULT_ANSWER_LOGPROB),
        );

        Scenario {
            corpus,
            instances: vec![QAInstance::new(self.query(), self.answer(), DATASET)],
            rules,
        }
    }
}

/// A random multi-hop instance: 1–4 hops, random stop-logit profile.
pub fn random_multi_hop(seed: u64, id: u32) -> MultiHop {
    let mut rng = seeds::rng(seed, &[u64::from(id)]);
    let mut spec = MultiHop::new(id, rng.gen_range(1..=4));
    if rng.gen_bool(0.5) {
        spec = spec.with_stop_logits(rng.gen_range(-4.0..0.0), rng.gen_range(0.2..1.5));
    }
    spec
}

/// One scenario holding `n` multi-hop instances with ids `first_id..`.
pub fn multi_hop_family(first_id: u32, n: usize, hops: impl Fn(usize) -> usize) -> Scenario {
    Scenario::combine((0..n).map(|i| MultiHop::new(first_id + i as u32, hops(i)).build()))
}
