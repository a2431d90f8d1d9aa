//! Closed vocabularies: object classes, colours, answers and tokens.

pub const N_CLASSES: usize = 5;
pub const N_COLORS: usize = 5;
pub const N_ANSWERS: usize = 16;

pub const CLASS_NAMES: [&str; N_CLASSES] = ["chair", "table", "cabinet", "lamp", "sofa"];
pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "green", "blue", "yellow", "purple"];

/// Nominal box extents (x, y, z) in metres per class.
pub const CLASS_SIZES: [[f64; 3]; N_CLASSES] = [
    [0.5, 0.5, 0.9],
    [1.0, 0.7, 0.75],
    [0.6, 0.5, 1.2],
    [0.3, 0.3, 1.4],
    [1.2, 0.6, 0.7],
];

/// Largest count a how-many question can have.
pub const MAX_COUNT: usize = 4;
/// Subjects of one scene's questions are distinct classes.
pub const MAX_QUESTIONS_PER_SCENE: usize = 4;

pub const ANSWER_YES: usize = 0;
pub const ANSWER_NO: usize = 1;

pub fn answer_count(n: usize) -> usize {
    debug_assert!((1..=MAX_COUNT).contains(&n));
    1 + n
}

pub fn answer_color(color: usize) -> usize {
    2 + MAX_COUNT + color
}

pub fn answer_class(class: usize) -> usize {
    2 + MAX_COUNT + N_COLORS + class
}

pub fn answer_name(answer: usize) -> String {
    match answer {
        ANSWER_YES => "yes".into(),
        ANSWER_NO => "no".into(),
        a if a < answer_color(0) => (a - 1).to_string(),
        a if a < answer_class(0) => COLOR_NAMES[a - answer_color(0)].into(),
        a if a < N_ANSWERS => CLASS_NAMES[a - answer_class(0)].into(),
        a => format!("<{a}>"),
    }
}

pub const PAD: usize = 0;

const WORDS: [&str; 16] = [
    "<pad>", "is", "there", "a", "how", "many", "what", "color", "the", "which", "object", "closest", "to",
    "standing", "at", "facing",
];

/// Situation positions are quantised into this many bins per axis.
pub const COORD_BINS: usize = 5;

pub const VOCAB_SIZE: usize = WORDS.len() + N_COLORS + N_CLASSES + COORD_BINS;

pub fn word(w: &str) -> usize {
    WORDS.iter().position(|x| *x == w).unwrap_or_else(|| panic!("unknown word {w}"))
}

pub fn color_token(color: usize) -> usize {
    WORDS.len() + color
}

pub fn class_token(class: usize) -> usize {
    WORDS.len() + N_COLORS + class
}

pub fn bin_token(bin: usize) -> usize {
    WORDS.len() + N_COLORS + N_CLASSES + bin
}

pub fn token_name(token: usize) -> String {
    if token < WORDS.len() {
        WORDS[token].into()
    } else if token < class_token(0) {
        COLOR_NAMES[token - color_token(0)].into()
    } else if token < bin_token(0) {
        CLASS_NAMES[token - class_token(0)].into()
    } else if token < VOCAB_SIZE {
        format!("bin{}", token - bin_token(0))
    } else {
        format!("<{token}>")
    }
}

/// "which object is closest to the <class>".
pub const MAX_QUESTION_LEN: usize = 7;
/// "standing at <x> <y> facing <class>".
pub const SITUATION_LEN: usize = 6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_cover_the_vocabulary_once() {
        let mut names: Vec<String> = (0..N_ANSWERS).map(answer_name).collect();
        assert_eq!(names[answer_count(3)], "3");
        assert_eq!(names[answer_color(0)], "red");
        assert_eq!(names[answer_class(4)], "sofa");
        names.sort();
        names.dedup();
        assert_eq!(names.len(), N_ANSWERS);
        assert_eq!(answer_class(N_CLASSES - 1), N_ANSWERS - 1);
    }

    #[test]
    fn tokens_are_distinct() {
        let mut names: Vec<String> = (0..VOCAB_SIZE).map(token_name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), VOCAB_SIZE);
        assert_eq!(word("which"), 9);
    }
}
