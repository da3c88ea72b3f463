//! Line-based architecture description.
//!
//! ```text
//! # comment
//! layer conv1 conv=stconv D=3 M=3 N=64 H=32 W=32 s=1 p=1
//! layer conv2 conv=falcon D=3 M=64 N=64 H=32 W=32 s=1 p=1 k=2
//! ```

use std::collections::HashMap;

use thiserror::Error;

use crate::analysis::{ConvType, LayerSpec};
use crate::tensor::ConvDims;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

const REQUIRED: [&str; 8] = ["conv", "D", "M", "N", "H", "W", "s", "p"];
const KNOWN: [&str; 11] = ["conv", "D", "M", "N", "H", "W", "s", "p", "k", "t", "g"];

pub fn parse_config(text: &str) -> Result<Vec<LayerSpec>, ConfigError> {
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let spec = parse_line(line).map_err(|message| ConfigError { line: i + 1, message })?;
        if layers.iter().any(|l: &LayerSpec| l.name == spec.name) {
            return Err(ConfigError {
                line: i + 1,
                message: format!("duplicate layer name '{}'", spec.name),
            });
        }
        layers.push(spec);
    }
    Ok(layers)
}

fn parse_line(line: &str) -> Result<LayerSpec, String> {
    let mut tokens = line.split_whitespace();
    match tokens.next() {
        Some("layer") => {}
        Some(other) => return Err(format!("expected 'layer', found '{other}'")),
        None => unreachable!("blank lines are skipped"),
    }
    let name = tokens.next().ok_or("missing layer name")?;
    if name.contains('=') {
        return Err(format!("missing layer name before '{name}'"));
    }

    let mut fields: HashMap<&str, &str> = HashMap::new();
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, found '{tok}'"))?;
        if !KNOWN.contains(&key) {
            return Err(format!("unknown key '{key}'"));
        }
        if fields.insert(key, value).is_some() {
            return Err(format!("key '{key}' given twice"));
        }
    }
    for key in REQUIRED {
        if !fields.contains_key(key) {
            return Err(format!("missing key '{key}'"));
        }
    }

    let int = |key: &str| -> Result<usize, String> {
        let v = fields[key];
        v.parse::<usize>()
            .map_err(|_| format!("{key}={v} is not a nonnegative integer"))
    };
    let dims = ConvDims::new(
        int("D")?,
        int("M")?,
        int("N")?,
        int("H")?,
        int("W")?,
        int("s")?,
        int("p")?,
    )
    .map_err(|e| e.to_string())?;
    let rank = if fields.contains_key("k") { int("k")? } else { 1 };
    if rank == 0 {
        return Err("k must be at least 1".into());
    }
    let t = match fields.get("t") {
        Some(v) => Some(v.parse::<f64>().map_err(|_| format!("t={v} is not a number"))?),
        None => None,
    };
    let g = if fields.contains_key("g") { Some(int("g")?) } else { None };
    let conv = ConvType::from_tag(fields["conv"], t, g).map_err(|e| e.to_string())?;

    Ok(LayerSpec {
        name: name.to_string(),
        dims,
        conv,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_layers_and_comments() {
        let text = "\
# header
layer a conv=stconv D=3 M=3 N=8 H=8 W=8 s=1 p=1

layer b conv=falcon D=3 M=8 N=8 H=8 W=8 s=2 p=1 k=2  # trailing
layer c conv=pdpconv D=3 M=8 N=8 H=4 W=4 s=1 p=1 t=2
layer d conv=gdgconv D=3 M=8 N=8 H=4 W=4 s=1 p=1 g=2
";
        let layers = parse_config(text).unwrap();
        assert_eq!(layers.len(), 4);
        assert_eq!(layers[0].name, "a");
        assert_eq!(layers[0].rank, 1);
        assert_eq!(layers[1].rank, 2);
        assert_eq!(layers[1].dims.stride, 2);
        assert_eq!(layers[2].conv, ConvType::Pdpconv { t: 2.0 });
        assert_eq!(layers[3].conv, ConvType::Gdgconv { g: 2 });
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            "layer a conv=stconv D=3 M=3 N=8 H=8 W=8 s=1 p=1 q=4",
            "layer a conv=stconv D=3 M=3 N=8 H=8 W=8 s=1",
            "layer a conv=stconv D=x M=3 N=8 H=8 W=8 s=1 p=1",
            "layer a conv=wide D=3 M=3 N=8 H=8 W=8 s=1 p=1",
            "layer a conv=stconv D=9 M=3 N=8 H=2 W=2 s=1 p=0",
            "conv a conv=stconv D=3 M=3 N=8 H=8 W=8 s=1 p=1",
            "layer conv=stconv D=3 M=3 N=8 H=8 W=8 s=1 p=1",
            "layer a conv=stconv D=3 M=3 N=8 H=8 W=8 s=1 p=1 k=0",
            "layer a conv=stconv D=3 D=3 M=3 N=8 H=8 W=8 s=1 p=1",
            "layer a conv=stconv D=3 M=3 N=8 H=8 W=8 s=1 p=1 t=2",
        ];
        for bad in cases {
            let text = format!("# ok\n\n{bad}\n");
            let err = parse_config(&text).unwrap_err();
            assert_eq!(err.line, 3, "{bad}: {err}");
        }
    }

    #[test]
    fn duplicate_layer_names() {
        let text = "layer a conv=stconv D=1 M=1 N=1 H=1 W=1 s=1 p=0\nlayer a conv=stconv D=1 M=1 N=1 H=1 W=1 s=1 p=0\n";
        assert_eq!(parse_config(text).unwrap_err().line, 2);
    }
}
