//! Fixed prompt phrases. Each phrase is registered as a single special token.

use crate::hetgraph::{EntityType, Step};

pub const INSTRUCTION: &str = "Given an ego-network in a job marketplace: ";
/// Closes the ego-graph segment.
pub const EGO_END: &str = ",";

pub const CENTER_MEMBER: &str = "the center member";
pub const CENTER_JOB: &str = "the center job";
pub const FEATURE_IS: &str = "is:";

pub const MEMBER_FOLLOWS: &str = "follows these members:";
pub const MEMBER_INTERESTED: &str = "is interested in these jobs:";
pub const JOB_INTERESTED_BY: &str = "is of interest to these members:";

pub const THEN_MEMBERS_OF_JOBS: &str = "the following users are also interested in some of these jobs:";
pub const THEN_JOBS_OF_MEMBERS: &str = "the following jobs also interest some of these members:";
pub const THEN_FOLLOWED_MEMBERS: &str = "the following members are also followed by some of these members:";

pub const SKILLS_QUESTION: &str = "The member could possess the following skills:";

pub const LINK_CENTER: &str = "The center";
pub const LINK_FOLLOWS: &str = "currently follows:";
pub const LINK_INTERESTED: &str = "is currently interested in:";
pub const LINK_FOLLOW_QUESTION: &str = "The member may be interested following in these members:";
pub const LINK_JOB_QUESTION: &str = "The member may be interested in these jobs:";

pub fn center_phrase(t: EntityType) -> &'static str {
    match t {
        EntityType::Member => CENTER_MEMBER,
        EntityType::Job => CENTER_JOB,
    }
}

/// Phrase for the first relation out of the center.
pub fn first_step_phrase(s: Step) -> &'static str {
    match (s.from_type(), s.to_type()) {
        (EntityType::Member, EntityType::Member) => MEMBER_FOLLOWS,
        (EntityType::Member, EntityType::Job) => MEMBER_INTERESTED,
        _ => JOB_INTERESTED_BY,
    }
}

/// Question for the final relation of a two-hop metapath.
pub fn second_step_phrase(s: Step) -> &'static str {
    match (s.from_type(), s.to_type()) {
        (EntityType::Job, EntityType::Member) => THEN_MEMBERS_OF_JOBS,
        (EntityType::Member, EntityType::Job) => THEN_JOBS_OF_MEMBERS,
        _ => THEN_FOLLOWED_MEMBERS,
    }
}

/// "the biography of the center member" and its analogues for other features.
pub fn feature_phrase(feature: &str, t: EntityType) -> String {
    format!("the {} of {}", feature.replace('_', " "), center_phrase(t))
}

pub fn binary_skill_question(skill: &str) -> String {
    format!("does the member possess the skill {skill}")
}

/// Every phrase that does not depend on data.
pub fn static_phrases() -> Vec<&'static str> {
    vec![
        INSTRUCTION,
        EGO_END,
        CENTER_MEMBER,
        CENTER_JOB,
        FEATURE_IS,
        MEMBER_FOLLOWS,
        MEMBER_INTERESTED,
        JOB_INTERESTED_BY,
        THEN_MEMBERS_OF_JOBS,
        THEN_JOBS_OF_MEMBERS,
        THEN_FOLLOWED_MEMBERS,
        SKILLS_QUESTION,
        LINK_CENTER,
        LINK_FOLLOWS,
        LINK_INTERESTED,
        LINK_FOLLOW_QUESTION,
        LINK_JOB_QUESTION,
    ]
}
