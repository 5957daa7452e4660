//! ASCII PLY reading and writing for colored vertex clouds.
//!
//! Only `format ascii 1.0` is accepted. The vertex element must carry
//! exactly the properties `x y z` (float) and `red green blue` (uchar), in
//! any order. Elements declared after `vertex` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq)]
enum Field {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Ply {
        line,
        msg: msg.into(),
    }
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    // A binary body is not valid UTF-8 in general; check the format line
    // before insisting on text.
    let head = String::from_utf8_lossy(&text[..text.len().min(256)]).into_owned();
    if let Some(fmt) = head.lines().find(|l| l.starts_with("format")) {
        if !fmt.contains("ascii") {
            return Err(Error::UnsupportedEncoding(fmt.trim().to_string()));
        }
    }
    let text = String::from_utf8(text).map_err(|_| parse_err(0, "file is not valid UTF-8"))?;
    parse_ply(&text)
}

/// Parses ASCII PLY text. Line numbers in errors are 1-based.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        Some((n, _)) => return Err(parse_err(n, "missing 'ply' magic")),
        None => return Err(parse_err(1, "missing header")),
    }

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut fields: Vec<Field> = Vec::new();
    let mut header_end = None;

    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let enc = tok.next().unwrap_or("");
                if enc != "ascii" {
                    return Err(Error::UnsupportedEncoding(enc.to_string()));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(n, "element without name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(n, "element without valid count"))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    if seen_vertex {
                        return Err(parse_err(n, "duplicate vertex element"));
                    }
                    seen_vertex = true;
                    vertex_count = Some(count);
                } else if !seen_vertex {
                    return Err(parse_err(n, format!("element '{name}' before vertex")));
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = tok.next().ok_or_else(|| parse_err(n, "property without type"))?;
                let name = tok.next().ok_or_else(|| parse_err(n, "property without name"))?;
                let field = match name {
                    "x" => Field::X,
                    "y" => Field::Y,
                    "z" => Field::Z,
                    "red" => Field::Red,
                    "green" => Field::Green,
                    "blue" => Field::Blue,
                    other => return Err(parse_err(n, format!("unknown property '{other}'"))),
                };
                let is_coord = matches!(field, Field::X | Field::Y | Field::Z);
                let ok_type = if is_coord {
                    matches!(ty, "float" | "float32" | "double" | "float64")
                } else {
                    matches!(ty, "uchar" | "uint8")
                };
                if !ok_type {
                    return Err(parse_err(n, format!("property '{name}' has type '{ty}'")));
                }
                if fields.contains(&field) {
                    return Err(parse_err(n, format!("duplicate property '{name}'")));
                }
                fields.push(field);
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some(other) => return Err(parse_err(n, format!("unexpected header keyword '{other}'"))),
        }
    }
    let header_end =
        header_end.ok_or_else(|| parse_err(text.lines().count(), "missing end_header"))?;
    let count = vertex_count.ok_or_else(|| parse_err(header_end, "no vertex element"))?;
    if count > 0 || !fields.is_empty() {
        for required in [Field::X, Field::Y, Field::Z, Field::Red, Field::Green, Field::Blue] {
            if !fields.contains(&required) {
                return Err(parse_err(header_end, "vertex element must have x,y,z,red,green,blue"));
            }
        }
    }

    let mut cloud = PointCloud {
        points: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
    };
    let mut last_line = header_end;
    while cloud.len() < count {
        let Some((n, line)) = lines.next() else {
            return Err(parse_err(
                last_line + 1,
                format!("expected {count} vertices, found {}", cloud.len()),
            ));
        };
        last_line = n;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != fields.len() {
            return Err(parse_err(
                n,
                format!("expected {} values, found {}", fields.len(), values.len()),
            ));
        }
        let mut p = [0.0; 3];
        let mut c = [0.0; 3];
        for (field, raw) in fields.iter().zip(values) {
            match field {
                Field::X | Field::Y | Field::Z => {
                    let v: f64 = raw
                        .parse()
                        .map_err(|_| parse_err(n, format!("bad float '{raw}'")))?;
                    if !v.is_finite() {
                        return Err(parse_err(n, format!("non-finite coordinate '{raw}'")));
                    }
                    p[*field as usize] = v;
                }
                _ => {
                    let v: u8 = raw
                        .parse()
                        .map_err(|_| parse_err(n, format!("bad uchar '{raw}'")))?;
                    c[*field as usize - 3] = f64::from(v) / 255.0;
                }
            }
        }
        cloud.push(p, c);
    }
    Ok(cloud)
}

/// Renders the cloud as ASCII PLY. Coordinates use the shortest decimal
/// form that parses back to the same `f64`; colors are rounded to uchar.
pub fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(64 + cloud.len() * 40);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            p[0],
            p[1],
            p[2],
            q(c[0]),
            q(c[1]),
            q(c[2])
        );
    }
    out
}

pub fn save_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_ply(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\n\
        property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n\
        property uchar blue\nend_header\n";

    fn with_body(n: usize, body: &str) -> String {
        HEADER.replace("{n}", &n.to_string()) + body
    }

    #[test]
    fn zero_vertices() {
        let cloud = parse_ply(&with_body(0, "")).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn uchar_255_maps_to_one() {
        let cloud = parse_ply(&with_body(1, "1 0 0 255 0 0\n")).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(cloud.colors, vec![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn property_order_is_respected() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty uchar red\n\
            property float z\nproperty float x\nproperty float y\nproperty uchar blue\n\
            property uchar green\nend_header\n51 3 1 2 0 102\n";
        let cloud = parse_ply(text).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(cloud.colors, vec![[0.2, 0.4, 0.0]]);
    }

    #[test]
    fn trailing_face_element_is_ignored() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n\
            property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n\
            property uchar blue\nelement face 1\nproperty list uchar int vertex_indices\n\
            end_header\n0 0 0 1 2 3\n3 0 0 0\n";
        assert_eq!(parse_ply(text).unwrap().len(), 1);
    }

    #[test]
    fn binary_is_rejected() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(parse_ply(text), Err(Error::UnsupportedEncoding(_))));
    }

    #[test]
    fn binary_file_is_rejected_before_utf8_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        let mut bytes =
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe, 0x00, 0x80]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_ply(&path), Err(Error::UnsupportedEncoding(_))));
    }

    #[test]
    fn missing_magic_names_line_one() {
        match parse_ply("plx\n") {
            Err(Error::Ply { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_property_names_its_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n\
            property float nx\nend_header\n";
        match parse_ply(text) {
            Err(Error::Ply { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("nx"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_an_error() {
        match parse_ply(&with_body(2, "0 0 0 0 0 0\n")) {
            Err(Error::Ply { line, msg }) => {
                assert_eq!(line, 12);
                assert!(msg.contains("expected 2"));
            }
            other => panic!("{other:?}"),
        }
        match parse_ply(&with_body(1, "0 0 0 0 0\n")) {
            Err(Error::Ply { line, .. }) => assert_eq!(line, 11),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_end_header() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\n";
        assert!(matches!(parse_ply(text), Err(Error::Ply { .. })));
    }

    proptest! {
        #[test]
        fn save_then_load_round_trips(
            raw in prop::collection::vec(
                ((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), (0u8.., 0u8.., 0u8..)),
                0..40,
            )
        ) {
            let mut cloud = PointCloud::default();
            for ((x, y, z), (r, g, b)) in raw {
                cloud.push(
                    [x, y, z],
                    [f64::from(r) / 255.0, f64::from(g) / 255.0, f64::from(b) / 255.0],
                );
            }
            let back = parse_ply(&write_ply(&cloud)).unwrap();
            prop_assert_eq!(back, cloud);
        }
    }
}
