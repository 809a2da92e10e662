//! Synthetic bilingual corpus.
//!
//! Language A is generated from a small grammar over pseudo-words spelled
//! with `a`-`z`. Language B renders the same sentence structures with every
//! letter shifted by a fixed code-point offset (by default into Cyrillic), so
//! the two lexicons are in bijection but share no letter bytes. B can
//! optionally put the object before the verb (SOV instead of SVO).
//!
//! Sentences are one or two clauses `subject [not] verb object`. Verbs
//! prefer certain objects, nouns prefer certain adjectives, and every verb
//! has a fixed reaction verb: a `so` clause after `S V O` reads
//! `O reaction(V) S`. The toy tasks are built from the same rules:
//!
//! - NLI: the premise carries adjectives; the entailed hypothesis drops
//!   them, the contradiction negates the verb, the neutral one is an
//!   unrelated clause.
//! - Paraphrase: swapping determiners keeps the meaning, swapping subject
//!   and object does not.
//! - Cause-effect: the reaction rule picks the right continuation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use super::{ParallelCorpus, TaskDataset, TaskExample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Content words per language (nouns, verbs, adjectives).
    #[serde(default = "default_vocab")]
    pub vocab_per_lang: usize,
    /// Code-point offset applied to `a`-`z` for language B.
    #[serde(default = "default_offset")]
    pub script_offset: u32,
    /// Language B puts the object before the verb.
    #[serde(default)]
    pub word_order_flip: bool,
    /// Documents per language.
    #[serde(default = "default_docs")]
    pub n_docs: usize,
    /// Mean document length in words (geometric distribution).
    #[serde(default = "default_doc_words")]
    pub mean_doc_words: usize,
    #[serde(default = "default_parallel")]
    pub n_parallel: usize,
    /// Examples per toy task and language.
    #[serde(default = "default_task")]
    pub n_task: usize,
}

fn default_vocab() -> usize {
    120
}
fn default_offset() -> u32 {
    0x3CF
}
fn default_docs() -> usize {
    2000
}
fn default_doc_words() -> usize {
    64
}
fn default_parallel() -> usize {
    200
}
fn default_task() -> usize {
    300
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_per_lang: default_vocab(),
            script_offset: default_offset(),
            word_order_flip: false,
            n_docs: default_docs(),
            mean_doc_words: default_doc_words(),
            n_parallel: default_parallel(),
            n_task: default_task(),
        }
    }
}

pub const LANG_A: &str = "syn-a";
pub const LANG_B: &str = "syn-b";

/// Word lists shared by both languages (spelled in A).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub dets: [String; 2],
    pub neg: String,
    pub because: String,
    pub so: String,
    pub right: String,
    pub yes: String,
    pub no: String,
    pub also: String,
    pub animate: Vec<String>,
    pub things: Vec<String>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
    /// `reaction[v]` is the verb of the `so` clause after verb `v`.
    pub reaction: Vec<usize>,
    /// Preferred objects per verb (indices into `animate ++ things`).
    pub objects: Vec<Vec<usize>>,
    /// Preferred adjectives per noun (indices into `adjectives`).
    pub noun_adjectives: Vec<Vec<usize>>,
    pub script_offset: u32,
    pub word_order_flip: bool,
}

impl Lexicon {
    fn nouns(&self) -> usize {
        self.animate.len() + self.things.len()
    }

    fn noun(&self, i: usize) -> &str {
        if i < self.animate.len() {
            &self.animate[i]
        } else {
            &self.things[i - self.animate.len()]
        }
    }

    /// Spells A text in language B's script.
    pub fn shift(&self, text: &str) -> String {
        text.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    char::from_u32(c as u32 + self.script_offset).unwrap_or(c)
                } else {
                    c
                }
            })
            .collect()
    }

    /// Inverse of [`Lexicon::shift`].
    pub fn unshift(&self, text: &str) -> String {
        let lo = 'a' as u32 + self.script_offset;
        let hi = 'z' as u32 + self.script_offset;
        text.chars()
            .map(|c| {
                let u = c as u32;
                if (lo..=hi).contains(&u) {
                    char::from_u32(u - self.script_offset).unwrap_or(c)
                } else {
                    c
                }
            })
            .collect()
    }

    /// A word in the requested language.
    pub fn word(&self, word: &str, lang_b: bool) -> String {
        if lang_b {
            self.shift(word)
        } else {
            word.to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Np {
    det: usize,
    adj: Option<usize>,
    noun: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Clause {
    subj: Np,
    verb: usize,
    obj: Np,
    neg: bool,
}

impl Clause {
    fn bare(self) -> Clause {
        Clause {
            subj: Np { adj: None, ..self.subj },
            obj: Np { adj: None, ..self.obj },
            ..self
        }
    }
}

fn render_np(lex: &Lexicon, np: Np, out: &mut Vec<String>) {
    out.push(lex.dets[np.det].clone());
    if let Some(a) = np.adj {
        out.push(lex.adjectives[a].clone());
    }
    out.push(lex.noun(np.noun).to_string());
}

fn render_clause(lex: &Lexicon, c: Clause, lang_b: bool) -> String {
    let mut words = Vec::new();
    render_np(lex, c.subj, &mut words);
    let mut verb = Vec::new();
    if c.neg {
        verb.push(lex.neg.clone());
    }
    verb.push(lex.verbs[c.verb].clone());
    if lang_b && lex.word_order_flip {
        render_np(lex, c.obj, &mut words);
        words.extend(verb);
    } else {
        words.extend(verb);
        render_np(lex, c.obj, &mut words);
    }
    lex.word(&words.join(" "), lang_b)
}

fn make_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    const CONS: &[u8] = b"bcdfghjklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONS[rng.random_range(0..CONS.len())] as char);
        w.push(VOW[rng.random_range(0..VOW.len())] as char);
        if rng.random_bool(0.3) {
            w.push(CONS[rng.random_range(0..CONS.len())] as char);
        }
    }
    w
}

fn build_lexicon(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Lexicon {
    let mut seen = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng, syl: std::ops::RangeInclusive<usize>| loop {
        let n = rng.random_range(syl.clone());
        let w = make_word(rng, n);
        if seen.insert(w.clone()) {
            break w;
        }
    };
    let dets = [fresh(rng, 1..=1), fresh(rng, 1..=1)];
    let neg = fresh(rng, 1..=1);
    let because = fresh(rng, 2..=2);
    let so = fresh(rng, 1..=1);
    let right = fresh(rng, 2..=2);
    let yes = fresh(rng, 1..=1);
    let no = fresh(rng, 1..=1);
    let also = fresh(rng, 2..=2);
    let n = spec.vocab_per_lang.max(12);
    let n_nouns = (n * 2) / 5;
    let n_verbs = (n * 3) / 10;
    let n_adj = n - n_nouns - n_verbs;
    let animate: Vec<String> = (0..n_nouns / 2).map(|_| fresh(rng, 1..=3)).collect();
    let things: Vec<String> = (0..n_nouns - n_nouns / 2).map(|_| fresh(rng, 1..=3)).collect();
    let verbs: Vec<String> = (0..n_verbs).map(|_| fresh(rng, 1..=3)).collect();
    let adjectives: Vec<String> = (0..n_adj).map(|_| fresh(rng, 1..=3)).collect();

    let mut reaction: Vec<usize> = (0..n_verbs).collect();
    rand::seq::SliceRandom::shuffle(reaction.as_mut_slice(), rng);
    let total_nouns = animate.len() + things.len();
    let objects = (0..n_verbs)
        .map(|_| {
            let k = (total_nouns / 4).max(2);
            rand::seq::index::sample(rng, total_nouns, k).into_vec()
        })
        .collect();
    let noun_adjectives = (0..total_nouns)
        .map(|_| rand::seq::index::sample(rng, n_adj, n_adj.min(5)).into_vec())
        .collect();
    Lexicon {
        dets,
        neg,
        because,
        so,
        right,
        yes,
        no,
        also,
        animate,
        things,
        verbs,
        adjectives,
        reaction,
        objects,
        noun_adjectives,
        script_offset: spec.script_offset,
        word_order_flip: spec.word_order_flip,
    }
}

/// Index drawn with probability proportional to `1 / (rank + 1)`.
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let total: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let mut x = rng.random::<f64>() * total;
    for r in 0..n {
        x -= 1.0 / (r + 1) as f64;
        if x <= 0.0 {
            return r;
        }
    }
    n - 1
}

struct Grammar<'a> {
    lex: &'a Lexicon,
}

impl Grammar<'_> {
    fn np(&self, rng: &mut ChaCha8Rng, noun: usize, adj_prob: f64) -> Np {
        let prefs = &self.lex.noun_adjectives[noun];
        let adj = (rng.random_bool(adj_prob) && !prefs.is_empty()).then(|| prefs[zipf(rng, prefs.len())]);
        Np {
            det: rng.random_range(0..2),
            adj,
            noun,
        }
    }

    fn clause(&self, rng: &mut ChaCha8Rng, topic: Option<&[usize]>, adj_prob: f64) -> Clause {
        let lex = self.lex;
        let subj_noun = match topic {
            Some(t) if rng.random_bool(0.7) => t[rng.random_range(0..t.len())],
            _ => zipf(rng, lex.animate.len()),
        };
        let verb = zipf(rng, lex.verbs.len());
        let prefs = &lex.objects[verb];
        let obj_noun = if rng.random_bool(0.85) {
            prefs[zipf(rng, prefs.len())]
        } else {
            rng.random_range(0..lex.nouns())
        };
        Clause {
            subj: self.np(rng, subj_noun, adj_prob),
            verb,
            obj: self.np(rng, obj_noun, adj_prob),
            neg: rng.random_bool(0.1),
        }
    }

    /// `S V O` leads to `O reaction(V) S`.
    fn effect(&self, c: Clause) -> Clause {
        Clause {
            subj: Np { adj: None, ..c.obj },
            verb: self.lex.reaction[c.verb],
            obj: Np { adj: None, ..c.subj },
            neg: false,
        }
    }

    /// The clause whose effect is `c`.
    fn cause(&self, c: Clause) -> Clause {
        let verb = self
            .lex
            .reaction
            .iter()
            .position(|&r| r == c.verb)
            .expect("reaction is a permutation");
        Clause {
            subj: Np { adj: None, ..c.obj },
            verb,
            obj: Np { adj: None, ..c.subj },
            neg: false,
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, topic: &[usize], lang_b: bool) -> (String, usize) {
        let lex = self.lex;
        let c = self.clause(rng, Some(topic), 0.4);
        let roll: f64 = rng.random();
        let text = if roll < 0.25 && !c.neg {
            format!(
                "{} {} {}",
                render_clause(lex, c, lang_b),
                lex.word(&lex.so, lang_b),
                render_clause(lex, self.effect(c), lang_b)
            )
        } else if roll < 0.4 && !c.neg {
            format!(
                "{} {} {}",
                render_clause(lex, self.effect(c), lang_b),
                lex.word(&lex.because, lang_b),
                render_clause(lex, c, lang_b)
            )
        } else {
            render_clause(lex, c, lang_b)
        };
        let words = text.split(' ').count();
        (text + ".", words)
    }

    fn document(&self, rng: &mut ChaCha8Rng, mean_words: usize, lang_b: bool) -> String {
        let p = 1.0 / mean_words.max(2) as f64;
        let target = Geometric::new(p).expect("valid p").sample(rng) as usize + 1;
        let topic: Vec<usize> = (0..3).map(|_| zipf(rng, self.lex.animate.len())).collect();
        let mut sentences = Vec::new();
        let mut words = 0;
        while words < target {
            let (s, n) = self.sentence(rng, &topic, lang_b);
            sentences.push(s);
            words += n;
        }
        sentences.join(" ")
    }
}

/// Everything [`synth_bilingual`] produces.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub lexicon: Lexicon,
    pub lang_a: Vec<String>,
    pub lang_b: Vec<String>,
    /// (language B, language A) translations of the same clauses.
    pub parallel: ParallelCorpus,
    /// NLI, paraphrase and cause-effect for A, then the same for B.
    pub tasks: Vec<TaskDataset>,
}

impl SynthCorpus {
    pub fn task(&self, kind: TaskKind, language: &str) -> Option<&TaskDataset> {
        self.tasks.iter().find(|t| t.kind == kind && t.language == language)
    }
}

fn example(fields: &[(&str, String)], choices: Vec<String>, label: usize, lang: &str) -> TaskExample {
    TaskExample {
        fields: fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        choices,
        label,
        language: lang.to_string(),
    }
}

fn task_sets(g: &Grammar, rng: &mut ChaCha8Rng, n: usize, lang_b: bool) -> Vec<TaskDataset> {
    let lex = g.lex;
    let lang = if lang_b { LANG_B } else { LANG_A };
    let say = |c: Clause| render_clause(lex, c, lang_b);
    let mut nli = Vec::with_capacity(n);
    let mut para = Vec::with_capacity(n);
    let mut cause = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = g.clause(rng, None, 1.0);
        p.neg = false;
        let label = i % 3;
        let hyp = match label {
            0 => p.bare(),
            1 => Clause { neg: true, ..p.bare() },
            _ => {
                let mut other = g.clause(rng, None, 0.0);
                other.neg = false;
                other
            }
        };
        nli.push(example(
            &[("premise", say(p)), ("hypothesis", say(hyp))],
            Vec::new(),
            label,
            lang,
        ));

        let s1 = g.clause(rng, None, 0.3);
        let plabel = i % 2;
        let s2 = if plabel == 0 {
            Clause {
                subj: Np { det: 1 - s1.subj.det, ..s1.subj },
                obj: Np { det: 1 - s1.obj.det, ..s1.obj },
                ..s1
            }
        } else {
            Clause {
                subj: s1.obj,
                obj: s1.subj,
                ..s1
            }
        };
        para.push(example(
            &[("sentence1", say(s1)), ("sentence2", say(s2))],
            Vec::new(),
            plabel,
            lang,
        ));

        let mut premise = g.clause(rng, None, 0.0);
        premise.neg = false;
        let question = if i % 2 == 0 { "effect" } else { "cause" };
        let right = if question == "effect" {
            g.effect(premise)
        } else {
            g.cause(premise)
        };
        let mut wrong = right;
        while wrong.verb == right.verb {
            wrong.verb = rng.random_range(0..lex.verbs.len());
        }
        let clabel = (i / 2) % 2;
        let choices = if clabel == 0 {
            vec![say(right), say(wrong)]
        } else {
            vec![say(wrong), say(right)]
        };
        cause.push(example(
            &[("premise", say(premise)), ("question", question.to_string())],
            choices,
            clabel,
            lang,
        ));
    }
    let ds = |name: &str, kind, examples| TaskDataset {
        name: format!("toy-{name}-{lang}"),
        kind,
        language: lang.to_string(),
        split: "train".into(),
        examples,
    };
    vec![
        ds("nli", TaskKind::Nli, nli),
        ds("paraphrase", TaskKind::Paraphrase, para),
        ds("cause", TaskKind::CauseEffect, cause),
    ]
}

/// Generates both corpora, parallel pairs and the toy tasks.
pub fn synth_bilingual(spec: &SynthSpec) -> SynthCorpus {
    let mut lex_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = build_lexicon(spec, &mut lex_rng);
    let g = Grammar { lex: &lexicon };
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k);

    let mut rng_a = stream(1);
    let lang_a = (0..spec.n_docs)
        .map(|_| g.document(&mut rng_a, spec.mean_doc_words, false))
        .collect();
    let mut rng_b = stream(2);
    let lang_b = (0..spec.n_docs)
        .map(|_| g.document(&mut rng_b, spec.mean_doc_words, true))
        .collect();
    let mut rng_p = stream(3);
    let pairs = (0..spec.n_parallel)
        .map(|_| {
            let c = g.clause(&mut rng_p, None, 0.4);
            (render_clause(&lexicon, c, true) + ".", render_clause(&lexicon, c, false) + ".")
        })
        .collect();
    let mut rng_t = stream(4);
    let mut tasks = task_sets(&g, &mut rng_t, spec.n_task, false);
    tasks.extend(task_sets(&g, &mut rng_t, spec.n_task, true));
    SynthCorpus {
        spec: spec.clone(),
        lexicon,
        lang_a,
        lang_b,
        parallel: ParallelCorpus { pairs },
        tasks,
    }
}
