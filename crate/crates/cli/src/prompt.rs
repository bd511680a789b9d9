//! The structured prompt mini-grammar.
//!
//! A prompt is comma-separated groups of `count:class:color`, e.g.
//! `two:sphere:red,one:cube:blue`. Counts expand to that many
//! entities; `--box x0,y0,x1,y1` flags pair with entities in
//! expansion order.

use como_core::world::{parse_class, parse_color, parse_count, BoundingBox2D, ScenePrompt};

pub fn parse_box(spec: &str, index: usize) -> Result<BoundingBox2D, String> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("box {index}: want x0,y0,x1,y1, got '{spec}'"));
    }
    let mut vals = [0.0f64; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .parse()
            .map_err(|_| format!("box {index}: '{p}' is not a number"))?;
    }
    BoundingBox2D::new(vals[0], vals[1], vals[2], vals[3])
        .map_err(|e| format!("box {index}: {e}"))
}

pub fn parse_prompt(prompt: &str, boxes: &[String]) -> Result<ScenePrompt, String> {
    let mut groups = Vec::new();
    for group in prompt.split(',') {
        let parts: Vec<&str> = group.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(format!(
                "prompt group '{group}' must be count:class:color (e.g. two:sphere:red)"
            ));
        }
        let count = parse_count(parts[0])
            .ok_or_else(|| format!("unknown count word '{}' (one..four)", parts[0]))?;
        let class = parse_class(parts[1])
            .ok_or_else(|| format!("unknown class '{}' (sphere, cube, donut)", parts[1]))?;
        let color = parse_color(parts[2])
            .ok_or_else(|| format!("unknown color '{}' (red, green, blue, yellow)", parts[2]))?;
        groups.push((count, class, color));
    }
    let total: usize = groups.iter().map(|g| g.0).sum();
    if total != boxes.len() {
        return Err(format!(
            "entity/box count mismatch: prompt names {total} entities but {} --box flags given",
            boxes.len()
        ));
    }
    let parsed: Result<Vec<BoundingBox2D>, String> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| parse_box(b, i))
        .collect();
    ScenePrompt::from_groups(&groups, &parsed?).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_round_trip() {
        let prompt = parse_prompt(
            "two:sphere:red,one:cube:blue",
            &[
                "0.1,0.4,0.3,0.6".to_string(),
                "0.4,0.4,0.6,0.6".to_string(),
                "0.7,0.4,0.9,0.6".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(prompt.entities.len(), 3);
        assert_eq!(prompt.entities[0].class_id, 0);
        assert_eq!(prompt.entities[2].class_id, 1);
        assert_eq!(prompt.entities[2].color_id, 2);
    }

    #[test]
    fn mismatched_box_count_is_an_error() {
        let err = parse_prompt("two:sphere:red", &["0.1,0.4,0.3,0.6".to_string()]).unwrap_err();
        assert!(err.contains("entity/box count mismatch"), "{err}");
    }

    #[test]
    fn invalid_box_names_its_index() {
        let err = parse_prompt(
            "two:sphere:red",
            &["0.1,0.4,0.3,0.6".to_string(), "0.9,0.4,0.2,0.6".to_string()],
        )
        .unwrap_err();
        assert!(err.contains("box 1"), "{err}");
    }

    #[test]
    fn unknown_words_are_rejected() {
        assert!(parse_prompt("five:sphere:red", &[]).is_err());
        assert!(parse_prompt("one:pyramid:red", &[]).is_err());
        assert!(parse_prompt("one:sphere:purple", &[]).is_err());
        assert!(parse_prompt("sphere:red", &[]).is_err());
    }
}
