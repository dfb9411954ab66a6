//! Dataset class table: ids, names, thing/stuff flags and the ignore label.
//!
//! Text form, one directive per line (`#` starts a comment):
//!
//! ```text
//! ignore_label 255
//! class 0 road stuff
//! class 1 car thing
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub is_thing: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
    pub ignore_label: u32,
}

impl ClassTable {
    /// Class ids must be exactly `0..K` in order.
    pub fn new(classes: Vec<ClassInfo>, ignore_label: u32) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Data("class table is empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::Data(format!("class ids must be 0..K in order, found {} at {}", c.id, i)));
            }
            if c.name.is_empty() || c.name.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid name for class {}", c.id)));
            }
        }
        if (ignore_label as usize) < classes.len() {
            return Err(Error::Data(format!("ignore_label {ignore_label} collides with a class id")));
        }
        Ok(Self { classes, ignore_label })
    }

    /// `num_stuff` stuff classes followed by `num_thing` thing classes.
    pub fn synthetic(num_stuff: usize, num_thing: usize) -> Self {
        let classes = (0..num_stuff + num_thing)
            .map(|id| ClassInfo {
                id,
                name: if id < num_stuff { format!("stuff{id}") } else { format!("thing{id}") },
                is_thing: id >= num_stuff,
            })
            .collect();
        Self::new(classes, 255).expect("valid synthetic table")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn is_thing(&self, class_id: usize) -> bool {
        self.classes.get(class_id).is_some_and(|c| c.is_thing)
    }

    pub fn thing_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().filter(|c| c.is_thing).map(|c| c.id)
    }

    pub fn stuff_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().filter(|c| !c.is_thing).map(|c| c.id)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ignore = None;
        let mut classes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("metadata line {}: {what}: {raw:?}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["ignore_label", v] => {
                    if ignore.is_some() {
                        return Err(bad("duplicate ignore_label"));
                    }
                    ignore = Some(v.parse::<u32>().map_err(|_| bad("bad ignore_label"))?);
                }
                ["class", id, name, kind] => {
                    let id = id.parse::<usize>().map_err(|_| bad("bad class id"))?;
                    let is_thing = match *kind {
                        "thing" => true,
                        "stuff" => false,
                        _ => return Err(bad("expected thing or stuff")),
                    };
                    classes.push(ClassInfo {
                        id,
                        name: name.to_string(),
                        is_thing,
                    });
                }
                _ => return Err(bad("unrecognized directive")),
            }
        }
        let ignore = ignore.ok_or_else(|| Error::Format("metadata has no ignore_label line".into()))?;
        Self::new(classes, ignore)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ignore_label {}\n", self.ignore_label);
        for c in &self.classes {
            let kind = if c.is_thing { "thing" } else { "stuff" };
            writeln!(s, "class {} {} {}", c.id, c.name, kind).expect("string write");
        }
        s
    }
}
