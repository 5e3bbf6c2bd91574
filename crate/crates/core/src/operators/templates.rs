//! Built-in operator request templates.
//!
//! Placeholders: `{{Module}}` (section name), `{{Module_Desc}}` (section
//! body), `{{Bad_Case_Reason_List}}` (JSON array of reasons),
//! `{{Parents}}` (scored variants), `{{Snippets}}` (retrieved passages) and
//! `{{Sections}}` (section listing for reordering).

pub const REFINE: &str = r#"You are an excellent prompt engineer, and you are familiar with the "Refine" optimization method, which is to improve or optimize the existing prompts. You can make the prompts better and more accurate through small adjustments or enhancements.

Below is a {{Module}} of a Prompt, the original expression is as follows:
{{Module_Desc}}

Please use the "Refine" method to optimize the expression. You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const REFLECT: &str = r#"Background
You are a natural language processing expert who is good at extracting key information from large amounts of text data and systematically summarizing it. You need to first extract common problems and root causes based on the existing bad case analysis results, and then improve the description of {{Module}} in a targeted manner.The analysis results of the bad case you received are as follows:
{{Bad_Case_Reason_List}}

Task Description
The current description of {{Module}} is as follows:
{{Module_Desc}}

Read the bad case analysis results and complete the following tasks for the description of {{Module}}:
1. Common problem extraction: Classify bad cases and extract common problems. You need to highlight high-frequency or high-impact key issues to ensure that the classification dimensions are clear and logically consistent.
2. Root cause analysis: For each type of problem, further analyze its root cause. You need to be brief and concise and get to the point without any vague nonsense.
3. Improvement of {{Module}} description: Optimize the description of {{Module}} based on the above summary. Expand and supplement {{Module}} when necessary, while avoiding redundancy to ensure that the key points are highlighted and the description is accurate.
You need to return the result directly in json format, and the json value must be in string format:
{
"Common problem extraction":"",
"Root cause analysis":"",
"Improved {{Module}} description":""
}"#;

pub const REWRITE: &str = r#"You are an excellent prompt engineer. Below is the {{Module}} section of a prompt:
{{Module_Desc}}

Replace this section entirely with a new version that states the same intent more clearly and completely. If the section is empty, write it from scratch based on its name. Do not keep the original wording unless it is essential.
You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const COT: &str = r#"You are an excellent prompt engineer. Below is the {{Module}} section of a prompt:
{{Module_Desc}}

Keep the section as it is and append a short step-by-step reasoning scaffold that tells the model how to think through this part of the task before answering.
You need to return the complete new section directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const SHORT_INSTRUCTION: &str = r#"You are an excellent prompt engineer. Below is the {{Module}} section of a prompt:
{{Module_Desc}}

Condense this section into the shortest instruction that keeps every requirement it states. Drop filler and repetition.
You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const DIFF_EVOLUTION: &str = r#"You are an excellent prompt engineer. Several variants of the {{Module}} section of a prompt have been evaluated. They are listed from best to worst with their scores:

{{Parents}}

Study how the variants differ and which differences go with higher scores. Write one new {{Module}} section that combines the strengths of the better variants and avoids the weaknesses of the worse ones.
You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const MERGE: &str = r#"You are an excellent prompt engineer. The following versions of the {{Module}} section come from different well-performing prompts, best first:

{{Parents}}

Merge them into a single {{Module}} section that keeps the best parts of each without repeating content.
You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const DEFINE_SORT: &str = r#"You are an excellent prompt engineer. A prompt is made of the following sections, in their current order (id: name, then the first line of the body):

{{Sections}}

Choose the order in which these sections should appear so that the prompt reads most naturally and the most important instructions sit where the model will attend to them. Use every id exactly once.
Return the result directly in JSON format:
{
"order":["id", "..."]
}"#;

pub const SELF_CONSISTENCY: &str = r#"You are an excellent prompt engineer. Below is the {{Module}} section of a prompt:
{{Module_Desc}}

Propose an improved version of this section that is accurate, unambiguous and consistent with its purpose.
You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

pub const RAG: &str = r#"You are an excellent prompt engineer. Below is the {{Module}} section of a prompt:
{{Module_Desc}}

The following reference passages were retrieved for this section:
{{Snippets}}

Use whatever in the passages is relevant to make the section more accurate and complete. Ignore passages that do not help.
You need to return the result directly in JSON format, and the JSON value must be in string format:
{
"{{Module}}":""
}"#;

/// Fills `{{Key}}` placeholders in a single left-to-right pass; substituted
/// text is never rescanned. Unknown placeholders are left as they are.
pub fn fill(template: &str, values: &[(&str, &str)]) -> alloc::string::String {
    let mut out = alloc::string::String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = &after[..end];
                match values.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(key);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        let s = fill("{{A}} and {{B}} and {{C}}", &[("A", "{{B}}"), ("B", "b")]);
        assert_eq!(s, "{{B}} and b and {{C}}");
    }

    #[test]
    fn fill_handles_unterminated() {
        assert_eq!(fill("x {{A", &[("A", "1")]), "x {{A");
    }
}
