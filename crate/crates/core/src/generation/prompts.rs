//! Prompt templates for the three generation steps.

const ATTRIBUTE_TASK: &str = "Visual attributes refer to observable, describable features of the images that can include color, shape, size, texture, and any specific patterns or markings, which can help differentiate between classes for the dataset. They should be consistently observable across multiple images of the same class. Your task is to generate a list of visual attributes (less than 10) for the {dataset} dataset. Ensure this list is clear, concise, and specific to the dataset's needs. Avoid generic attributes that do not contribute to distinguishing between classes.";

const EXAMPLE_TASK: &str =
    "Describe describe what a \"{class}\" class in the {dataset} dataset look like using the generated visual attributes.";

const ALL_CLASSES_TASK: &str = "Your task is to write detailed descriptions for various classes within the {dataset} dataset, using the provided visual attributes such as color and shape. These descriptions will help in accurately classifying and understanding the unique features of each class.";

const RULES: [&str; 7] = [
    "For each visual attribute, describe all possible variations as separate sentences. This approach allows for a detailed and clear presentation of each attribute's range.",
    "Provide a maximum of five descriptions for each visual attribute to maintain focus and relevance. Also, aim to provide at least two descriptions to ensure a comprehensive overview of the attribute.",
    "The descriptions should provide clear, distinguishable features of each class to support image classification tasks.",
    "Descriptions for each attribute are independent from each other, and they should not serve as context for each other.",
    "Each description describes an image independetly. If certain description is possible for a class, please just list that description, and do not use words like \"may have\" or \"sometimes have\".",
    "Reply descriptions only. Do not include any explanation before and after the description.",
    "The descriptions should follow the format of \"classname, which ...\", where \"...\" is the description of the visual attribute.",
];

const QUESTION: &str = "Q: Describe what a \"{class}\" in the {dataset} look like using the following visual attributes: {attributes}";

fn rules() -> String {
    let mut out = String::from("You must follow the following rules:\n");
    for (i, r) in RULES.iter().enumerate() {
        out.push_str(&format!("{}. {r}\n", i + 1));
    }
    out.pop();
    out
}

fn question(class: &str, dataset: &str, attributes: &[String]) -> String {
    QUESTION.replace("{class}", class).replace("{dataset}", dataset).replace("{attributes}", &attributes.join(", "))
}

pub fn attribute_prompt(dataset: &str, description: &str) -> String {
    format!("{}\n\n{}", description.trim(), ATTRIBUTE_TASK.replace("{dataset}", dataset))
}

pub fn example_prompt(dataset: &str, seed_class: &str) -> String {
    format!("{}\n\n{}", EXAMPLE_TASK.replace("{class}", seed_class).replace("{dataset}", dataset), rules())
}

pub fn class_prompt(
    dataset: &str,
    description: &str,
    attributes: &[String],
    seed_class: &str,
    example_answer: &str,
    target_class: &str,
) -> String {
    format!(
        "{}\n\n{}\n\n{}\n\n{}\nA: {}\n\n{}\nA:",
        description.trim(),
        ALL_CLASSES_TASK.replace("{dataset}", dataset),
        rules(),
        question(seed_class, dataset, attributes),
        example_answer.trim(),
        question(target_class, dataset, attributes),
    )
}

/// Follow-up sent after a response that broke the format rules.
pub fn repair_prompt(problems: &[String]) -> String {
    let mut out = String::from("Your answer does not follow the rules:\n");
    for p in problems {
        out.push_str(&format!("- {p}\n"));
    }
    out.push_str("Answer again. Group descriptions under a line naming each visual attribute.");
    out
}
