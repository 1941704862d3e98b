//! Synthetic skill corpora: a seeded knowledge world, text generators and a
//! closed whitespace vocabulary.

pub mod generators;
pub mod vocab;
pub mod world;

pub use generators::{gen_downstream, gen_skill_instance, oracle_answer, DownstreamTask, Skill, SkillInstance};
pub use vocab::Vocabulary;
pub use world::{SyntheticWorld, Triple, WorldSizes};

impl Vocabulary {
    /// Closed vocabulary covering every token the generators emit for `world`.
    pub fn for_world(world: &SyntheticWorld) -> Vocabulary {
        Vocabulary::from_tokens(world.all_tokens())
    }
}
