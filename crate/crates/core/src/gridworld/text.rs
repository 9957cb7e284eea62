//! Canonical text encoding of layouts and states.
//!
//! A layout is one line of space-separated fields:
//!
//! ```text
//! layout <task> <size> cells=<rows> walls=<rows|-> goal=<r,c|-> printer=<r,c|-> table=<r,c;...|->
//! ```
//!
//! `cells` lists one character per cell (`.` empty, `H` hole, `G` goal,
//! `T` table, `P` printer), rows separated by `/`. `walls` lists one hex
//! digit per cell (bit 1 up, 2 down, 4 left, 8 right) in the same shape, or
//! `-` outside Maze.
//!
//! A state on a known layout is written compactly as `r,c` (FrozenLake,
//! Maze) or `r,c/<0|1>/<r,c|->` (MiniBehavior: carrying flag, printer cell).
//! The encoding is stable; fields never change meaning between versions.

use super::{CellKind, EnvState, Layout, Pos, TaskKind};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed record: {0}")]
pub struct TextError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, TextError> {
    Err(TextError(msg.into()))
}

fn cell_char(k: CellKind) -> char {
    match k {
        CellKind::Empty => '.',
        CellKind::Hole => 'H',
        CellKind::Goal => 'G',
        CellKind::Table => 'T',
        CellKind::Printer => 'P',
    }
}

fn char_cell(c: char) -> Option<CellKind> {
    Some(match c {
        '.' => CellKind::Empty,
        'H' => CellKind::Hole,
        'G' => CellKind::Goal,
        'T' => CellKind::Table,
        'P' => CellKind::Printer,
        _ => return None,
    })
}

fn pos_str(p: Option<Pos>) -> String {
    p.map_or_else(|| "-".to_string(), |p| format!("{},{}", p.row, p.col))
}

fn parse_pos(s: &str) -> Result<Option<Pos>, TextError> {
    if s == "-" {
        return Ok(None);
    }
    let (r, c) = s.split_once(',').ok_or_else(|| TextError(format!("bad position {s:?}")))?;
    let row = r.parse().map_err(|_| TextError(format!("bad row {r:?}")))?;
    let col = c.parse().map_err(|_| TextError(format!("bad col {c:?}")))?;
    Ok(Some(Pos::new(row, col)))
}

fn rows<T>(items: &[T], size: usize, f: impl Fn(&T) -> char) -> String {
    items
        .chunks(size)
        .map(|row| row.iter().map(&f).collect::<String>())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn encode_layout(l: &Layout) -> String {
    let walls = if l.task == TaskKind::Maze {
        rows(&l.walls, l.size, |&m| char::from_digit(m as u32, 16).expect("4-bit mask"))
    } else {
        "-".into()
    };
    let table = if l.table.is_empty() {
        "-".to_string()
    } else {
        l.table.iter().map(|&p| pos_str(Some(p))).collect::<Vec<_>>().join(";")
    };
    format!(
        "layout {} {} cells={} walls={} goal={} printer={} table={}",
        l.task.tag(),
        l.size,
        rows(&l.cells, l.size, |&k| cell_char(k)),
        walls,
        pos_str(l.goal),
        pos_str(l.printer),
        table
    )
}

pub fn decode_layout(line: &str) -> Result<Layout, TextError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != "layout" {
        return err(format!("expected 8 layout fields, got {:?}", line));
    }
    let task = TaskKind::from_tag(fields[1]).ok_or_else(|| TextError(format!("unknown task {}", fields[1])))?;
    let size: usize = fields[2].parse().map_err(|_| TextError("bad size".into()))?;
    if size == 0 {
        return err("size must be positive");
    }
    let value = |i: usize, key: &str| -> Result<&str, TextError> {
        fields[i]
            .strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .ok_or_else(|| TextError(format!("expected field {key}")))
    };
    let cell_rows: Vec<&str> = value(3, "cells")?.split('/').collect();
    if cell_rows.len() != size || cell_rows.iter().any(|r| r.chars().count() != size) {
        return err("cell grid has wrong shape");
    }
    let cells = cell_rows
        .iter()
        .flat_map(|r| r.chars())
        .map(|c| char_cell(c).ok_or_else(|| TextError(format!("bad cell code {c:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let walls_field = value(4, "walls")?;
    let walls = if walls_field == "-" {
        if task == TaskKind::Maze {
            return err("maze layout needs walls");
        }
        Vec::new()
    } else {
        let wall_rows: Vec<&str> = walls_field.split('/').collect();
        if wall_rows.len() != size || wall_rows.iter().any(|r| r.chars().count() != size) {
            return err("wall grid has wrong shape");
        }
        wall_rows
            .iter()
            .flat_map(|r| r.chars())
            .map(|c| c.to_digit(16).map(|d| d as u8).ok_or_else(|| TextError(format!("bad wall code {c:?}"))))
            .collect::<Result<Vec<_>, _>>()?
    };
    let goal = parse_pos(value(5, "goal")?)?;
    let printer = parse_pos(value(6, "printer")?)?;
    let table_field = value(7, "table")?;
    let table = if table_field == "-" {
        Vec::new()
    } else {
        table_field
            .split(';')
            .map(|s| parse_pos(s).and_then(|p| p.ok_or_else(|| TextError("empty table entry".into()))))
            .collect::<Result<Vec<_>, _>>()?
    };
    let layout = Layout {
        task,
        size,
        cells,
        walls,
        goal,
        printer,
        table,
    };
    let inside = |p: &Pos| layout.contains(*p);
    if !layout.goal.iter().all(inside) || !layout.printer.iter().all(inside) || !layout.table.iter().all(inside) {
        return err("position outside the grid");
    }
    Ok(layout)
}

pub fn encode_state(s: &EnvState) -> String {
    if s.task() == TaskKind::MiniBehavior {
        format!("{}/{}/{}", pos_str(Some(s.agent)), u8::from(s.carrying), pos_str(s.printer))
    } else {
        pos_str(Some(s.agent))
    }
}

pub fn decode_state(layout: &Arc<Layout>, s: &str) -> Result<EnvState, TextError> {
    let parts: Vec<&str> = s.split('/').collect();
    let agent = parse_pos(parts[0])?.ok_or_else(|| TextError("missing agent".into()))?;
    let state = match (layout.task, parts.len()) {
        (TaskKind::MiniBehavior, 3) => EnvState {
            layout: layout.clone(),
            agent,
            carrying: match parts[1] {
                "0" => false,
                "1" => true,
                other => return err(format!("bad carrying flag {other:?}")),
            },
            printer: parse_pos(parts[2])?,
        },
        (TaskKind::MiniBehavior, _) => return err("minibehavior state needs 3 parts"),
        (_, 1) => EnvState::new(layout.clone(), agent),
        _ => return err("unexpected state parts"),
    };
    state.validate().map_err(TextError)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{gen_layout, size_range, spawn_state};

    #[test]
    fn layout_roundtrip_all_tasks() {
        for task in TaskKind::ALL {
            for seed in 0..5 {
                let l = gen_layout(task, size_range(task).0 + 1, seed).unwrap();
                let line = encode_layout(&l);
                assert_eq!(decode_layout(&line).unwrap(), l, "{line}");
                let arc = Arc::new(l);
                let s = spawn_state(&arc, seed);
                assert_eq!(decode_state(&arc, &encode_state(&s)).unwrap(), s);
            }
        }
    }

    #[test]
    fn known_encoding() {
        let mut l = Layout::blank(TaskKind::FrozenLake, 3);
        l.set_goal(Pos::new(2, 2));
        l.cells[1] = CellKind::Hole;
        assert_eq!(
            encode_layout(&l),
            "layout frozenlake 3 cells=.H./.../..G walls=- goal=2,2 printer=- table=-"
        );
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_layout("layout frozenlake 3 cells=.H./... walls=- goal=2,2 printer=- table=-").is_err());
        assert!(decode_layout("layout maze 3 cells=.../.../..G walls=- goal=2,2 printer=- table=-").is_err());
        assert!(decode_layout("layout lake 3").is_err());
        assert!(decode_layout("layout frozenlake 3 cells=.X./.../..G walls=- goal=2,2 printer=- table=-").is_err());
        let l = Arc::new(decode_layout("layout frozenlake 3 cells=.H./.../..G walls=- goal=2,2 printer=- table=-").unwrap());
        assert!(decode_state(&l, "0,1").is_err(), "agent on hole");
        assert!(decode_state(&l, "9,9").is_err());
    }
}
