//! Templated text-to-text generators for the six pretraining skills and the
//! three downstream compositional tasks. Every target is recomputable from the
//! world, so the generators double as labelling oracles.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{SyntheticWorld, Triple};
use crate::error::{Error, Result};

/// Fixed template vocabulary shared by all generators.
pub const TEMPLATE_WORDS: &[&str] = &[
    ":", "?", ".", ";", "fact", "logic", "if", "then", "flag", "holds", "therefore", "qa", "context",
    "question", "ner", "find", "in", "none", "nli", "premise", "hypothesis", "entail", "contradict",
    "neutral", "general", "[mask]", "is", "rule", "else", "typed", "type", "yes", "no",
];

pub const FLAGS: &[&str] = &["A", "B", "C", "D", "E", "F", "G", "H"];

/// Pretraining skills, in router index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skill {
    Logic,
    Qa,
    Ner,
    Nli,
    Fact,
    General,
}

impl Skill {
    pub const ALL: [Skill; 6] = [Skill::Logic, Skill::Qa, Skill::Ner, Skill::Nli, Skill::Fact, Skill::General];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Skill> {
        Skill::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::Logic => "logic",
            Skill::Qa => "qa",
            Skill::Ner => "ner",
            Skill::Nli => "nli",
            Skill::Fact => "fact",
            Skill::General => "general",
        }
    }

    pub fn parse(s: &str) -> Result<Skill> {
        Skill::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown skill `{s}`")))
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamTask {
    Hop2Qa,
    LogicFact,
    TypedHop2,
}

impl DownstreamTask {
    pub const ALL: [DownstreamTask; 3] = [DownstreamTask::Hop2Qa, DownstreamTask::LogicFact, DownstreamTask::TypedHop2];

    pub fn name(self) -> &'static str {
        match self {
            DownstreamTask::Hop2Qa => "hop2_qa",
            DownstreamTask::LogicFact => "logic_fact",
            DownstreamTask::TypedHop2 => "typed_hop2",
        }
    }

    pub fn parse(s: &str) -> Result<DownstreamTask> {
        DownstreamTask::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown downstream task `{s}`")))
    }

    /// Answer options for multiple-choice tasks; `None` for open-ended ones.
    pub fn options(self, inst: &SkillInstance) -> Option<Vec<String>> {
        match self {
            DownstreamTask::LogicFact => {
                // "rule : if h r t then flag X else flag Y ."
                let toks: Vec<&str> = inst.input.split_whitespace().collect();
                let x = toks.get(8)?;
                let y = toks.get(11)?;
                Some(alloc::vec![String::from(*x), String::from(*y)])
            }
            _ => None,
        }
    }
}

impl fmt::Display for DownstreamTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One text-to-text example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkillInstance {
    pub input: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<Skill>,
    pub task: String,
}

impl SkillInstance {
    pub fn validate(&self) -> Result<()> {
        if self.input.trim().is_empty() || self.target.trim().is_empty() {
            return Err(Error::Validation("instance input and target must be non-empty".into()));
        }
        Ok(())
    }
}

const MAX_RETRIES: usize = 1000;

fn pick<'a, R: Rng + ?Sized>(world: &'a SyntheticWorld, rng: &mut R) -> &'a Triple {
    world.triples().choose(rng).expect("world has triples")
}

/// True when the two facts chain (`a.tail == b.head` or vice versa).
pub fn forms_chain(a: &Triple, b: &Triple) -> bool {
    a.tail == b.head || b.tail == a.head
}

fn random_statement<R: Rng + ?Sized>(world: &SyntheticWorld, rng: &mut R) -> Triple {
    let n = world.sizes.entities;
    let head = rng.gen_range(0..n);
    let mut tail = rng.gen_range(0..n - 1);
    if tail >= head {
        tail += 1;
    }
    Triple {
        head,
        relation: rng.gen_range(0..world.sizes.relations),
        tail,
    }
}

fn two_flags<R: Rng + ?Sized>(rng: &mut R) -> (&'static str, &'static str) {
    let mut picked = FLAGS.choose_multiple(rng, 2);
    (picked.next().unwrap(), picked.next().unwrap())
}

/// `logic : if S1 then flag F1 . [if S2 then flag F2 .] S holds . therefore ?`
pub fn logic_input(world: &SyntheticWorld, rules: &[(Triple, &str)], holds: &Triple) -> String {
    let mut s = String::from("logic :");
    for (stmt, flag) in rules {
        s.push_str(&format!(" if {} then flag {flag} .", world.triple_text(stmt)));
    }
    s.push_str(&format!(" {} holds . therefore ?", world.triple_text(holds)));
    s
}

pub fn fact_instance(world: &SyntheticWorld, t: &Triple) -> SkillInstance {
    SkillInstance {
        input: format!(
            "fact : {} {} ?",
            world.entity_token(t.head),
            world.relation_token(t.relation)
        ),
        target: world.entity_token(t.tail),
        skill: Some(Skill::Fact),
        task: String::from("fact"),
    }
}

/// NLI label for a premise/hypothesis pair under a functional KB.
pub fn nli_label(premise: &Triple, hypothesis: &Triple) -> &'static str {
    if premise == hypothesis {
        "entail"
    } else if premise.head == hypothesis.head && premise.relation == hypothesis.relation {
        "contradict"
    } else {
        "neutral"
    }
}

pub fn nli_instance(world: &SyntheticWorld, premise: &Triple, hypothesis: &Triple) -> SkillInstance {
    SkillInstance {
        input: format!(
            "nli : premise {} . hypothesis {} .",
            world.triple_text(premise),
            world.triple_text(hypothesis)
        ),
        target: String::from(nli_label(premise, hypothesis)),
        skill: Some(Skill::Nli),
        task: String::from("nli"),
    }
}

/// One pretraining instance for `skill`.
pub fn gen_skill_instance<R: Rng + ?Sized>(world: &SyntheticWorld, skill: Skill, rng: &mut R) -> SkillInstance {
    let inst = match skill {
        Skill::Fact => fact_instance(world, pick(world, rng)),
        Skill::Logic => {
            let a = random_statement(world, rng);
            let b = loop {
                let b = random_statement(world, rng);
                if b != a && !forms_chain(&a, &b) {
                    break b;
                }
            };
            let (fa, fb) = two_flags(rng);
            let rules = [(a, fa), (b, fb)];
            let n_rules = if rng.gen_bool(0.25) { 1 } else { 2 };
            let held = rng.gen_range(0..n_rules);
            let mut used = rules[..n_rules].to_vec();
            used.shuffle(rng);
            let (holds, flag) = rules[held];
            SkillInstance {
                input: logic_input(world, &used, &holds),
                target: String::from(flag),
                skill: Some(Skill::Logic),
                task: String::new(),
            }
        }
        Skill::Qa => {
            let mut ctx: Vec<Triple> = Vec::with_capacity(3);
            while ctx.len() < 3 {
                let t = *pick(world, rng);
                if ctx.iter().all(|c| c.head != t.head && !forms_chain(c, &t)) {
                    ctx.push(t);
                }
            }
            let asked = ctx[rng.gen_range(0..ctx.len())];
            let body: Vec<String> = ctx.iter().map(|t| world.triple_text(t)).collect();
            SkillInstance {
                input: format!(
                    "qa : context {} . question {} {} ?",
                    body.join(" . "),
                    world.entity_token(asked.head),
                    world.relation_token(asked.relation)
                ),
                target: world.entity_token(asked.tail),
                skill: Some(Skill::Qa),
                task: String::new(),
            }
        }
        Skill::Ner => {
            let n = world.sizes.entities;
            let mentions: Vec<usize> = rand::seq::index::sample(rng, n, 4).into_vec();
            let wanted = if rng.gen_bool(0.8) {
                world.entity_type(mentions[rng.gen_range(0..mentions.len())])
            } else {
                rng.gen_range(0..world.sizes.types)
            };
            let found: Vec<String> = mentions
                .iter()
                .filter(|&&e| world.entity_type(e) == wanted)
                .map(|&e| world.entity_token(e))
                .collect();
            let sentence: Vec<String> = mentions.iter().map(|&e| world.entity_token(e)).collect();
            SkillInstance {
                input: format!("ner : find {} in {} .", world.type_token(wanted), sentence.join(" ")),
                target: if found.is_empty() {
                    String::from("none")
                } else {
                    found.join(" ")
                },
                skill: Some(Skill::Ner),
                task: String::new(),
            }
        }
        Skill::Nli => {
            let p = *pick(world, rng);
            let h = match rng.gen_range(0..3) {
                0 => p,
                1 => {
                    let mut tail = rng.gen_range(0..world.sizes.entities - 1);
                    if tail >= p.tail {
                        tail += 1;
                    }
                    Triple { tail, ..p }
                }
                _ => loop {
                    // a different fact that does not chain with the premise
                    let h = *pick(world, rng);
                    if (h.head, h.relation) != (p.head, p.relation) && !forms_chain(&p, &h) {
                        break h;
                    }
                },
            };
            nli_instance(world, &p, &h)
        }
        Skill::General => {
            let t = *pick(world, rng);
            let ty = world.type_token(world.entity_type(t.tail));
            let mut toks = [
                world.entity_token(t.head),
                world.relation_token(t.relation),
                world.entity_token(t.tail),
                ty,
            ];
            // mask the head, relation or type slot (masking the tail would be a
            // copy task); head and relation only when the world pins them down
            let mut slots = alloc::vec![3usize];
            if unique_head(world, t.relation, t.tail) {
                slots.push(0);
            }
            if unique_relation(world, t.head, t.tail) {
                slots.push(1);
            }
            let slot = slots[rng.gen_range(0..slots.len())];
            let answer = core::mem::replace(&mut toks[slot], String::from("[mask]"));
            SkillInstance {
                input: format!("general : {} {} {} . {} is {}", toks[0], toks[1], toks[2], toks[2], toks[3]),
                target: answer,
                skill: Some(Skill::General),
                task: String::new(),
            }
        }
    };
    SkillInstance {
        task: String::from(skill.name()),
        ..inst
    }
}

fn unique_head(world: &SyntheticWorld, relation: usize, tail: usize) -> bool {
    world
        .triples()
        .iter()
        .filter(|x| x.relation == relation && x.tail == tail)
        .count()
        == 1
}

fn unique_relation(world: &SyntheticWorld, head: usize, tail: usize) -> bool {
    world
        .relations_of(head)
        .into_iter()
        .filter(|&r| world.tail(head, r) == Some(tail))
        .count()
        == 1
}

/// A 2-chain `(e, r1) → m`, `(m, r2) → x`.
pub fn sample_chain<R: Rng + ?Sized>(world: &SyntheticWorld, rng: &mut R) -> Result<(Triple, Triple)> {
    for _ in 0..MAX_RETRIES {
        let first = *pick(world, rng);
        let rels = world.relations_of(first.tail);
        if rels.is_empty() {
            continue;
        }
        let r2 = rels[rng.gen_range(0..rels.len())];
        let tail = world.tail(first.tail, r2).expect("listed relation exists");
        if tail == first.head {
            continue;
        }
        return Ok((
            first,
            Triple {
                head: first.tail,
                relation: r2,
                tail,
            },
        ));
    }
    Err(Error::Generation(format!("no valid 2-chain after {MAX_RETRIES} samples")))
}

pub fn hop2_instance(world: &SyntheticWorld, e: usize, r1: usize, r2: usize) -> Result<SkillInstance> {
    let mid = world
        .tail(e, r1)
        .ok_or_else(|| Error::Generation(format!("no fact for ({e}, {r1})")))?;
    let ans = world
        .tail(mid, r2)
        .ok_or_else(|| Error::Generation(format!("hop result {mid} has no relation {r2}")))?;
    Ok(SkillInstance {
        input: format!(
            "question : {} {} {} ?",
            world.entity_token(e),
            world.relation_token(r1),
            world.relation_token(r2)
        ),
        target: world.entity_token(ans),
        skill: None,
        task: String::from(DownstreamTask::Hop2Qa.name()),
    })
}

/// One downstream instance; skill labels are absent by construction.
pub fn gen_downstream<R: Rng + ?Sized>(world: &SyntheticWorld, task: DownstreamTask, rng: &mut R) -> Result<SkillInstance> {
    match task {
        DownstreamTask::Hop2Qa => {
            let (a, b) = sample_chain(world, rng)?;
            hop2_instance(world, a.head, a.relation, b.relation)
        }
        DownstreamTask::TypedHop2 => {
            let (a, b) = sample_chain(world, rng)?;
            Ok(SkillInstance {
                input: format!(
                    "typed : {} {} {} type {} ?",
                    world.entity_token(a.head),
                    world.relation_token(a.relation),
                    world.relation_token(b.relation),
                    world.type_token(world.entity_type(b.tail))
                ),
                target: world.entity_token(b.tail),
                skill: None,
                task: String::from(task.name()),
            })
        }
        DownstreamTask::LogicFact => {
            let t = *pick(world, rng);
            let holds = rng.gen_bool(0.5);
            let stated = if holds {
                t
            } else {
                let mut tail = rng.gen_range(0..world.sizes.entities - 1);
                if tail >= t.tail {
                    tail += 1;
                }
                Triple { tail, ..t }
            };
            let (x, y) = two_flags(rng);
            Ok(SkillInstance {
                input: format!("rule : if {} then flag {x} else flag {y} .", world.triple_text(&stated)),
                target: String::from(if holds { x } else { y }),
                skill: None,
                task: String::from(task.name()),
            })
        }
    }
}

/// Independent re-derivation of a pretraining target from the world and the
/// instance text. Returns `None` for inputs it cannot parse.
pub fn oracle_answer(world: &SyntheticWorld, inst: &SkillInstance) -> Option<String> {
    let toks: Vec<&str> = inst.input.split_whitespace().collect();
    let ent = |s: &str| world.parse_entity(s);
    let rel = |s: &str| world.parse_relation(s);
    match *toks.first()? {
        "fact" => Some(world.entity_token(world.tail(ent(toks[2])?, rel(toks[3])?)?)),
        "question" => {
            let mid = world.tail(ent(toks[2])?, rel(toks[3])?)?;
            Some(world.entity_token(world.tail(mid, rel(toks[4])?)?))
        }
        "typed" => {
            let mid = world.tail(ent(toks[2])?, rel(toks[3])?)?;
            let ans = world.tail(mid, rel(toks[4])?)?;
            (world.type_token(world.entity_type(ans)) == toks[6]).then(|| world.entity_token(ans))
        }
        "rule" => {
            let t = Triple {
                head: ent(toks[3])?,
                relation: rel(toks[4])?,
                tail: ent(toks[5])?,
            };
            Some(String::from(if world.contains(&t) { toks[8] } else { toks[11] }))
        }
        "nli" => {
            let p = Triple {
                head: ent(toks[3])?,
                relation: rel(toks[4])?,
                tail: ent(toks[5])?,
            };
            let h = Triple {
                head: ent(toks[8])?,
                relation: rel(toks[9])?,
                tail: ent(toks[10])?,
            };
            Some(String::from(nli_label(&p, &h)))
        }
        "logic" => {
            // rules are "if h r t then flag F ."; the held statement precedes "holds"
            let holds_at = toks.iter().position(|&t| t == "holds")?;
            let held = &toks[holds_at - 3..holds_at];
            let mut i = 2;
            while toks.get(i) == Some(&"if") {
                if toks[i + 1..i + 4] == *held {
                    return Some(String::from(toks[i + 6]));
                }
                i += 8;
            }
            None
        }
        "qa" => {
            let q = toks.iter().position(|&t| t == "question")?;
            Some(world.entity_token(world.tail(ent(toks[q + 1])?, rel(toks[q + 2])?)?))
        }
        "ner" => {
            let wanted = toks[3];
            let found: Vec<&str> = toks[5..toks.len() - 1]
                .iter()
                .copied()
                .filter(|t| ent(t).map(|e| world.type_token(world.entity_type(e))) == Some(String::from(wanted)))
                .collect();
            Some(if found.is_empty() {
                String::from("none")
            } else {
                found.join(" ")
            })
        }
        "general" => {
            let h = ent(toks[2]);
            let r = rel(toks[3]);
            let t = ent(toks[4])?;
            let ty = toks[8];
            match (h, r, ty) {
                (None, Some(r), _) => {
                    // masked head: the unique entity whose relation r leads to t
                    let heads: Vec<usize> = world
                        .triples()
                        .iter()
                        .filter(|x| x.relation == r && x.tail == t)
                        .map(|x| x.head)
                        .collect();
                    (heads.len() == 1).then(|| world.entity_token(heads[0]))
                }
                (Some(h), None, _) => {
                    let rels: Vec<usize> = world
                        .relations_of(h)
                        .into_iter()
                        .filter(|&r| world.tail(h, r) == Some(t))
                        .collect();
                    (rels.len() == 1).then(|| world.relation_token(rels[0]))
                }
                (Some(_), Some(_), "[mask]") => Some(world.type_token(world.entity_type(t))),
                _ => None,
            }
        }
        _ => None,
    }
}

/// Entity-relation-entity triples mentioned anywhere in a text.
pub fn mentioned_triples(world: &SyntheticWorld, text: &str) -> Vec<Triple> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    for w in toks.windows(3) {
        if let (Some(h), Some(r), Some(t)) = (world.parse_entity(w[0]), world.parse_relation(w[1]), world.parse_entity(w[2])) {
            out.push(Triple { head: h, relation: r, tail: t });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::world::WorldSizes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> SyntheticWorld {
        SyntheticWorld::build(42, WorldSizes::default()).unwrap()
    }

    #[test]
    fn fact_example_matches_kb_lookup() {
        let w = world();
        let r3_head = w.triples().iter().find(|t| t.head == 7).copied().unwrap();
        let inst = fact_instance(&w, &r3_head);
        assert!(inst.input.starts_with("fact : e007 "));
        assert_eq!(inst.target, w.entity_token(w.tail(7, r3_head.relation).unwrap()));
    }

    #[test]
    fn logic_template_forces_answer() {
        let w = world();
        let s = Triple {
            head: 1,
            relation: 2,
            tail: 5,
        };
        let input = logic_input(&w, &[(s, "B")], &s);
        assert_eq!(input, "logic : if e001 r02 e005 then flag B . e001 r02 e005 holds . therefore ?");
        let inst = SkillInstance {
            input,
            target: String::from("B"),
            skill: Some(Skill::Logic),
            task: String::from("logic"),
        };
        assert_eq!(oracle_answer(&w, &inst).as_deref(), Some("B"));
    }

    #[test]
    fn identical_hypothesis_entails() {
        let w = world();
        let p = w.triples()[10];
        assert_eq!(nli_instance(&w, &p, &p).target, "entail");
    }

    #[test]
    fn every_generated_target_matches_the_oracle() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for skill in Skill::ALL {
            for _ in 0..200 {
                let inst = gen_skill_instance(&w, skill, &mut rng);
                inst.validate().unwrap();
                assert_eq!(inst.skill, Some(skill));
                assert_eq!(inst.task, skill.name());
                assert_eq!(oracle_answer(&w, &inst).as_deref(), Some(inst.target.as_str()), "{inst:?}");
            }
        }
        for task in DownstreamTask::ALL {
            for _ in 0..200 {
                let inst = gen_downstream(&w, task, &mut rng).unwrap();
                assert_eq!(inst.skill, None);
                assert_eq!(oracle_answer(&w, &inst).as_deref(), Some(inst.target.as_str()), "{inst:?}");
            }
        }
    }

    #[test]
    fn hop2_is_two_lookups_and_rejects_broken_chains() {
        let w = world();
        let (a, b) = sample_chain(&w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let inst = hop2_instance(&w, a.head, a.relation, b.relation).unwrap();
        assert_eq!(inst.target, w.entity_token(w.tail(w.tail(a.head, a.relation).unwrap(), b.relation).unwrap()));
        // a relation the middle entity lacks
        let mid = a.tail;
        let missing = (0..w.sizes.relations).find(|&r| w.tail(mid, r).is_none()).unwrap();
        assert!(matches!(hop2_instance(&w, a.head, a.relation, missing), Err(Error::Generation(_))));
    }

    #[test]
    fn typed_hop2_answer_has_requested_type() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let inst = gen_downstream(&w, DownstreamTask::TypedHop2, &mut rng).unwrap();
            let toks: Vec<&str> = inst.input.split_whitespace().collect();
            let ans = w.parse_entity(&inst.target).unwrap();
            assert_eq!(w.type_token(w.entity_type(ans)), toks[6]);
        }
    }

    #[test]
    fn pretraining_instances_never_hold_a_complete_chain() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for skill in Skill::ALL {
            for _ in 0..300 {
                let inst = gen_skill_instance(&w, skill, &mut rng);
                let ts = mentioned_triples(&w, &inst.input);
                for (i, a) in ts.iter().enumerate() {
                    for b in &ts[i + 1..] {
                        assert!(a == b || !forms_chain(a, b), "{inst:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn logic_fact_options_are_the_two_flags() {
        let w = world();
        let inst = gen_downstream(&w, DownstreamTask::LogicFact, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let opts = DownstreamTask::LogicFact.options(&inst).unwrap();
        assert_eq!(opts.len(), 2);
        assert!(opts.contains(&inst.target));
        assert!(DownstreamTask::Hop2Qa.options(&inst).is_none());
    }
}
