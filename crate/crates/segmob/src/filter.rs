//! Visit filters behind a common trait, registered by name and selected at
//! runtime from the config `filter` key or the CLI.
//!
//! Built-in specs: `all`, `exclude-home`, `poi-only`, `intra:<group>`,
//! `inter:<group1>,<group2>`. Groups come from the SES map's optional `group`
//! property (borough-style super regions), defaulting to the region id.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::inference::{Visit, VisitKind};

/// Shared lookup tables filters may consult.
#[derive(Debug, Default, Clone)]
pub struct FilterContext {
    /// user_id -> home region id
    pub home_regions: BTreeMap<String, String>,
    /// region id -> super-region group label
    pub region_groups: BTreeMap<String, String>,
}

impl FilterContext {
    fn group_of<'a>(&'a self, region_id: &'a str) -> &'a str {
        self.region_groups
            .get(region_id)
            .map(String::as_str)
            .unwrap_or(region_id)
    }

    fn home_group_of<'a>(&'a self, user_id: &str) -> Option<&'a str> {
        self.home_regions
            .get(user_id)
            .map(|r| self.group_of(r))
    }
}

pub trait VisitFilter: Send + Sync {
    /// Canonical spec string that would rebuild this filter.
    fn name(&self) -> String;
    fn keep(&self, visit: &Visit, ctx: &FilterContext) -> bool;
}

struct AllVisits;

impl VisitFilter for AllVisits {
    fn name(&self) -> String {
        "all".into()
    }
    fn keep(&self, _visit: &Visit, _ctx: &FilterContext) -> bool {
        true
    }
}

/// Drops visits to the visitor's own home region (kind = home).
struct ExcludeHomeRegion;

impl VisitFilter for ExcludeHomeRegion {
    fn name(&self) -> String {
        "exclude-home".into()
    }
    fn keep(&self, visit: &Visit, _ctx: &FilterContext) -> bool {
        visit.kind != VisitKind::Home
    }
}

struct PoiOnly;

impl VisitFilter for PoiOnly {
    fn name(&self) -> String {
        "poi-only".into()
    }
    fn keep(&self, visit: &Visit, _ctx: &FilterContext) -> bool {
        visit.kind == VisitKind::Poi
    }
}

/// Visits by users homed in `group` to places in the same group.
struct IntraRegion {
    group: String,
}

impl VisitFilter for IntraRegion {
    fn name(&self) -> String {
        format!("intra:{}", self.group)
    }
    fn keep(&self, visit: &Visit, ctx: &FilterContext) -> bool {
        ctx.home_group_of(&visit.user_id) == Some(self.group.as_str())
            && ctx.group_of(&visit.region_id) == self.group
    }
}

/// Visits by users homed in one group to places in the other.
struct InterRegion {
    a: String,
    b: String,
}

impl VisitFilter for InterRegion {
    fn name(&self) -> String {
        format!("inter:{},{}", self.a, self.b)
    }
    fn keep(&self, visit: &Visit, ctx: &FilterContext) -> bool {
        let Some(home) = ctx.home_group_of(&visit.user_id) else {
            return false;
        };
        let place = ctx.group_of(&visit.region_id);
        (home == self.a && place == self.b) || (home == self.b && place == self.a)
    }
}

type FilterBuilder = fn(&str) -> Result<Box<dyn VisitFilter>>;

/// Name-keyed registry of filter constructors. A spec string is
/// `<name>[:<args>]`.
pub struct FilterRegistry {
    builders: BTreeMap<&'static str, FilterBuilder>,
}

impl FilterRegistry {
    pub fn with_builtins() -> Self {
        let mut reg = FilterRegistry {
            builders: BTreeMap::new(),
        };
        reg.register("all", |args| {
            expect_no_args("all", args)?;
            Ok(Box::new(AllVisits))
        });
        reg.register("exclude-home", |args| {
            expect_no_args("exclude-home", args)?;
            Ok(Box::new(ExcludeHomeRegion))
        });
        reg.register("poi-only", |args| {
            expect_no_args("poi-only", args)?;
            Ok(Box::new(PoiOnly))
        });
        reg.register("intra", |args| {
            if args.is_empty() {
                return Err(Error::UnknownFilter("intra: needs a group".into()));
            }
            Ok(Box::new(IntraRegion {
                group: args.to_string(),
            }))
        });
        reg.register("inter", |args| {
            let (a, b) = args
                .split_once(',')
                .ok_or_else(|| Error::UnknownFilter("inter: needs two groups".into()))?;
            if a.is_empty() || b.is_empty() {
                return Err(Error::UnknownFilter("inter: needs two groups".into()));
            }
            Ok(Box::new(InterRegion {
                a: a.to_string(),
                b: b.to_string(),
            }))
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, builder: FilterBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, spec: &str) -> Result<Box<dyn VisitFilter>> {
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), a.trim()),
            None => (spec.trim(), ""),
        };
        let builder = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownFilter(spec.to_string()))?;
        builder(args)
    }
}

fn expect_no_args(name: &str, args: &str) -> Result<()> {
    if args.is_empty() {
        Ok(())
    } else {
        Err(Error::UnknownFilter(format!("{name} takes no arguments")))
    }
}

/// Build the configured filter from the builtin registry.
pub fn parse_filter(spec: &str) -> Result<Box<dyn VisitFilter>> {
    FilterRegistry::with_builtins().build(spec)
}
