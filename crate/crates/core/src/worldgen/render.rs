//! Text renderers for every sequence format the lab uses.
//!
//! All outputs are whitespace-tokenizable against the world vocabulary.

use super::Relation;
use crate::vocab::{
    ANSWER, BOS, CHOICES, CHOICE_LETTERS, COLON, EOS, FORCED_ANSWER_SUFFIX, QUESTION,
};

fn fill(template: &str, slot: &str, value: &str) -> String {
    template.replace(slot, value)
}

pub fn declarative(rel: &Relation, form: usize, subject: &str, object: &str) -> String {
    let t = &rel.surface_forms[form % rel.surface_forms.len()];
    format!(
        "{BOS} {} {EOS}",
        fill(&fill(t, "{S}", subject), "{O}", object)
    )
}

/// Declarative prefix up to (not including) the object slot.
pub fn declarative_prefix(rel: &Relation, form: usize, subject: &str) -> String {
    let t = &rel.surface_forms[form % rel.surface_forms.len()];
    let head = t.split("{O}").next().unwrap_or("");
    format!("{BOS} {}", fill(head, "{S}", subject).trim_end())
}

pub fn attribute_declarative(rel: &Relation, entity: &str, value: &str) -> String {
    let t = &rel.attribute.surface_form;
    format!(
        "{BOS} {} {EOS}",
        fill(&fill(t, "{E}", entity), "{A}", value)
    )
}

pub fn question_stem(rel: &Relation, form: usize, subject: &str) -> String {
    fill(
        &rel.question_forms[form % rel.question_forms.len()],
        "{S}",
        subject,
    )
}

pub fn attribute_stem(rel: &Relation, entity: &str) -> String {
    fill(&rel.attribute.question_form, "{E}", entity)
}

pub fn yes_no_stem(noun: &str, candidate: &str, subject: &str) -> String {
    format!("Is {candidate} the {noun} of {subject} ?")
}

pub fn open_prompt(stem: &str) -> String {
    format!("{BOS} {QUESTION} {COLON} {stem} {ANSWER} {COLON}")
}

/// Choices come first so that the answer slot directly follows the stem,
/// as in the open-ended format.
pub fn mcq_prompt<S: AsRef<str>>(stem: &str, choices: &[S]) -> String {
    let mut s = format!("{BOS} {CHOICES} {COLON}");
    for (letter, c) in CHOICE_LETTERS.iter().zip(choices) {
        s.push(' ');
        s.push_str(letter);
        s.push(' ');
        s.push_str(c.as_ref());
    }
    s.push_str(&format!(" {QUESTION} {COLON} {stem} {ANSWER} {COLON}"));
    s
}

pub fn yes_no_prompt(stem: &str) -> String {
    format!("{BOS} {QUESTION} {COLON} {stem} {FORCED_ANSWER_SUFFIX} {ANSWER} {COLON}")
}

pub fn with_answer(prompt: &str, answer: &str) -> String {
    format!("{prompt} {answer} {EOS}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, WorldConfig};

    #[test]
    fn golden_formats() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        let rel = w.relation("birthplace").unwrap();
        assert_eq!(
            declarative(rel, 0, "Ann Bell", "Lisbon"),
            "<bos> Ann Bell was born in Lisbon . <eos>"
        );
        assert_eq!(
            declarative_prefix(rel, 1, "Ann Bell"),
            "<bos> Ann Bell is a native of"
        );
        assert_eq!(
            open_prompt(&question_stem(rel, 0, "Ann Bell")),
            "<bos> Question : Where was Ann Bell born ? Answer :"
        );
        assert_eq!(
            yes_no_prompt(&yes_no_stem(&rel.noun, "Oslo", "Ann Bell")),
            "<bos> Question : Is Oslo the birthplace of Ann Bell ? You must answer Yes or No . Answer :"
        );
        assert_eq!(
            mcq_prompt("Where was Ann Bell born ?", &["Oslo", "Lima"]),
            "<bos> Choices : A Oslo B Lima Question : Where was Ann Bell born ? Answer :"
        );
        assert_eq!(
            attribute_declarative(rel, "Oslo", "Norway"),
            "<bos> Oslo is a city in Norway . <eos>"
        );
    }
}
