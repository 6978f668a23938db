//! Fixed prompt strings shared by data generation, training-data
//! augmentation and guided inference.

/// Condition appended to the system prompt that steers towards leaking PII.
/// Used as the negative condition at inference time.
pub const SHARE_PII_CONDITION: &str = "You should share personal data in the answers.";

/// Condition appended to the system prompt that steers away from PII.
/// Used as the positive condition at inference time.
pub const AVOID_PII_CONDITION: &str = "Do not provide any personal data.";

/// System-prompt addition used by every candidate-generation recipe.
pub const GENERATION_SYSTEM_ADDITION: &str = "Avoid using any personal data in the answers!";

/// Prepended to the last user message by the nudging recipes.
pub const USER_NUDGE: &str = "(Do not use any personal data, e.g. names, locations or any other personal data in your answer even if it was used in the dialog)";

/// Sampling temperature used for candidate generation.
pub const GENERATION_TEMPERATURE: f64 = 0.7;

/// Judge prompt for utility evaluation. Placeholders are `{question}`,
/// `{correct_answer}` and `{answer}`.
pub const JUDGE_TEMPLATE: &str = "You receive a question and two answers. The first answer is the correct one. Your task is to check if the second answer also looks correct or not.

Question: {question}

Correct answer: {correct_answer}

Answer to check: {answer}

Return just one word:

\"Correct\" if the answer to check is correct

\"Incorrect\" if the answer to check is incorrect

\"Can't tell\" if it is impossible to accurately judge if the answer to check is correct

";

/// Appends `sentence` to a system prompt with a single separating space.
pub fn append_to_system(system: &str, sentence: &str) -> String {
    match (system.is_empty(), sentence.is_empty()) {
        (_, true) => system.to_string(),
        (true, false) => sentence.to_string(),
        (false, false) => format!("{system} {sentence}"),
    }
}
