//! Resource sampling for a process group via /proc.

use std::fs;
use std::time::Duration;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct GroupUsage {
    pub processes: u32,
    pub rss_bytes: u64,
    pub cpu: Duration,
}

pub fn group_usage(pgid: i32) -> GroupUsage {
    let ticks = clock_ticks();
    let page = page_size();
    let mut usage = GroupUsage::default();
    let Ok(dir) = fs::read_dir("/proc") else {
        return usage;
    };
    for entry in dir.flatten() {
        let name = entry.file_name();
        let Some(pid) = name.to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(stat) = fs::read_to_string(format!("/proc/{pid}/stat")) else {
            continue;
        };
        let Some(s) = parse_stat(&stat) else {
            continue;
        };
        if s.pgrp != pgid || s.state == 'Z' {
            continue;
        }
        usage.processes += 1;
        usage.rss_bytes += s.rss_pages * page;
        usage.cpu += Duration::from_millis((s.utime + s.stime) * 1000 / ticks);
    }
    usage
}

#[derive(Debug, PartialEq, Eq)]
struct Stat {
    state: char,
    pgrp: i32,
    utime: u64,
    stime: u64,
    rss_pages: u64,
}

// Fields after the parenthesised command name, which may itself contain
// spaces and parentheses.
fn parse_stat(line: &str) -> Option<Stat> {
    let rest = &line[line.rfind(')')? + 1..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    Some(Stat {
        state: f.first()?.chars().next()?,
        pgrp: f.get(2)?.parse().ok()?,
        utime: f.get(11)?.parse().ok()?,
        stime: f.get(12)?.parse().ok()?,
        rss_pages: f.get(21)?.parse().ok()?,
    })
}

fn clock_ticks() -> u64 {
    // SAFETY: sysconf has no memory-safety preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as u64
    } else {
        100
    }
}

fn page_size() -> u64 {
    // SAFETY: as above.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 {
        p as u64
    } else {
        4096
    }
}
