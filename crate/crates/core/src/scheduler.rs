//! Population strategy, cross-layer conversions and the idle-tick work loop.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bank::NodeId;
use crate::config::Config;
use crate::engine::{Engine, PendingPrediction, Prepared};
use crate::error::Result;
use crate::model::CostReport;
use crate::predictor::View;
use crate::qa::EntryId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerConfig {
    pub tau_query: f64,
    pub tau_scheduler: f64,
    pub prediction_stride: usize,
    pub qkv_limit_bytes: u64,
    pub qa_limit_bytes: u64,
    pub qkv_to_qa: bool,
    pub qa_to_qkv: bool,
}

impl From<&Config> for SchedulerConfig {
    fn from(c: &Config) -> Self {
        SchedulerConfig {
            tau_query: c.tau_query,
            tau_scheduler: c.tau_scheduler,
            prediction_stride: c.prediction_stride,
            qkv_limit_bytes: c.qkv_limit_bytes,
            qa_limit_bytes: c.qa_limit_bytes,
            qkv_to_qa: c.qkv_to_qa,
            qa_to_qkv: c.qa_to_qkv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationStrategy {
    PrefillOnly,
    PrefillAndDecode,
}

impl PopulationStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            PopulationStrategy::PrefillOnly => "prefill_only",
            PopulationStrategy::PrefillAndDecode => "prefill_and_decode",
        }
    }

    pub fn decodes(&self) -> bool {
        *self == PopulationStrategy::PrefillAndDecode
    }
}

/// A strict threshold would make hits rare, so predicted answers are not worth decoding.
pub fn choose_strategy(cfg: &SchedulerConfig) -> PopulationStrategy {
    if cfg.tau_query >= cfg.tau_scheduler {
        PopulationStrategy::PrefillOnly
    } else {
        PopulationStrategy::PrefillAndDecode
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickAction {
    DeferredAnswer,
    StaleAnswer,
    QkvToQa,
    QaToQkv,
    Abstract,
    KnowledgePrediction,
    HistoryPrediction,
    Populate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickItem {
    pub action: TickAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    /// Predictions produced, for prediction items.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicted: Vec<String>,
    /// Slices written, for restoration and population items.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeId>,
    pub cost: CostReport,
}

impl TickItem {
    fn new(action: TickAction) -> Self {
        TickItem {
            action,
            query: None,
            view: None,
            predicted: Vec::new(),
            nodes: Vec::new(),
            cost: CostReport::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub budget: f64,
    pub used_flops: f64,
    pub strategy: PopulationStrategy,
    pub items: Vec<TickItem>,
    /// Work left for a later tick because it did not fit.
    pub carried_over: bool,
}

impl TickReport {
    fn empty(budget: f64, strategy: PopulationStrategy) -> Self {
        TickReport {
            budget,
            used_flops: 0.0,
            strategy,
            items: Vec::new(),
            carried_over: false,
        }
    }

    pub fn total_cost(&self) -> CostReport {
        let mut c = CostReport::default();
        for i in &self.items {
            c.add(&i.cost);
        }
        c
    }

    pub fn items_of(&self, action: TickAction) -> impl Iterator<Item = &TickItem> {
        self.items.iter().filter(move |i| i.action == action)
    }
}

fn view_name(v: View) -> String {
    match v {
        View::Knowledge => "knowledge".into(),
        View::History => "history".into(),
    }
}

/// Budget bookkeeping for one tick.
struct Meter {
    left: f64,
    stopped: bool,
}

impl Meter {
    fn fits(&mut self, est: &CostReport) -> bool {
        if self.stopped || est.total_flops() > self.left {
            self.stopped = true;
            return false;
        }
        true
    }

    fn spend(&mut self, cost: &CostReport) {
        self.left = (self.left - cost.total_flops()).max(0.0);
    }
}

impl Engine {
    /// Runs budgeted background work: deferred and stale answers, conversions,
    /// then due predictions and population under the active strategy.
    pub fn idle_tick(&mut self, budget: f64, now: u64) -> Result<TickReport> {
        self.require_idle()?;
        let strategy = self.strategy();
        let mut report = TickReport::empty(budget, strategy);
        if budget <= 0.0 || !self.cfg.caching {
            return Ok(report);
        }
        let mut meter = Meter {
            left: budget,
            stopped: false,
        };

        self.answer_deferred(now, &mut meter, &mut report)?;
        self.answer_stale(now, &mut meter, &mut report)?;
        if self.cfg.scheduler && self.cfg.qkv_to_qa && strategy.decodes() {
            self.qkv_to_qa_step(self.cfg.conversion_batch, now, &mut meter, &mut report)?;
        }
        if self.cfg.scheduler && self.cfg.qa_to_qkv {
            self.qa_to_qkv_step(self.cfg.conversion_batch, now, &mut meter, &mut report)?;
        }
        if !meter.stopped {
            self.run_predictions(now, &mut report);
            self.run_population(strategy, now, &mut meter, &mut report)?;
        }
        report.used_flops = budget - meter.left;
        report.carried_over = meter.stopped;
        Ok(report)
    }

    fn prepare_query(&self, query: &str) -> Result<Prepared> {
        self.prepare(query, self.embed(query))
    }

    fn answer_deferred(&mut self, now: u64, meter: &mut Meter, report: &mut TickReport) -> Result<()> {
        while let Some(query) = self.deferred.front().cloned() {
            let p = self.prepare_query(&query)?;
            if !meter.fits(&self.estimate_background(&p, true)?) {
                return Ok(());
            }
            self.deferred.pop_front();
            let inf = self.infer(&p, now, false, true, false)?;
            meter.spend(&inf.cost);
            self.populate(&p, &inf, now)?;
            let mut item = TickItem::new(TickAction::DeferredAnswer);
            item.query = Some(query);
            item.cost = inf.cost;
            report.items.push(item);
        }
        Ok(())
    }

    fn answer_stale(&mut self, now: u64, meter: &mut Meter, report: &mut TickReport) -> Result<()> {
        for id in self.qa.stale() {
            if meter.stopped {
                return Ok(());
            }
            let query = self.qa.get(id).expect("stale entry").query.clone();
            let p = self.prepare_query(&query)?;
            if !meter.fits(&self.estimate_background(&p, true)?) {
                return Ok(());
            }
            let inf = self.infer(&p, now, false, true, false)?;
            meter.spend(&inf.cost);
            let answer = inf.answer.as_ref().expect("decoded").text.clone();
            self.qa.set_answer(id, answer, now);
            let mut item = TickItem::new(TickAction::StaleAnswer);
            item.query = Some(query);
            item.cost = inf.cost;
            report.items.push(item);
        }
        Ok(())
    }

    fn qkv_to_qa_step(&mut self, limit: usize, now: u64, meter: &mut Meter, report: &mut TickReport) -> Result<Vec<EntryId>> {
        let mut done = Vec::new();
        for id in self.qa.answerless().into_iter().take(limit) {
            if meter.stopped {
                break;
            }
            let query = self.qa.get(id).expect("entry").query.clone();
            let p = self.prepare_query(&query)?;
            if !meter.fits(&self.estimate_background(&p, true)?) {
                break;
            }
            let inf = match self.infer(&p, now, false, true, false) {
                Ok(inf) => inf,
                Err(e @ crate::Error::Backend(_)) => {
                    log::warn!("could not answer `{query}`: {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            meter.spend(&inf.cost);
            let answer = inf.answer.as_ref().expect("decoded").text.clone();
            self.qa.set_answer(id, answer, now);
            let mut item = TickItem::new(TickAction::QkvToQa);
            item.query = Some(query);
            item.cost = inf.cost;
            report.items.push(item);
            done.push(id);
        }
        Ok(done)
    }

    /// Entries whose chunk path crosses evicted slices that would fit back in
    /// without evicting, most-retrieved first.
    fn restorable(&self) -> Result<Vec<(EntryId, Prepared)>> {
        let mut found = Vec::new();
        let free = self.bank.ledger().free_bytes();
        for e in self.qa.entries() {
            let p = self.prepare_query(&e.query)?;
            let chain = self.bank.tree().structural_chain(&p.layout.chunk_path());
            let hottest = chain
                .iter()
                .filter_map(|id| self.bank.tree().node(*id))
                .filter(|n| !n.is_present())
                .map(|n| n.retrieval_count)
                .max();
            let Some(hottest) = hottest else { continue };
            let cost = self.bank.insert_cost(&p.layout, &p.tokens);
            if cost == 0 || cost > free {
                continue;
            }
            found.push((std::cmp::Reverse(hottest), e.id, p));
        }
        found.sort_by_key(|(h, id, _)| (*h, *id));
        Ok(found.into_iter().map(|(_, id, p)| (id, p)).collect())
    }

    fn qa_to_qkv_step(&mut self, limit: usize, now: u64, meter: &mut Meter, report: &mut TickReport) -> Result<Vec<NodeId>> {
        let mut restored = Vec::new();
        let mut tried = BTreeSet::new();
        while tried.len() < limit && !meter.stopped {
            let Some((id, p)) = self.restorable()?.into_iter().find(|(id, _)| !tried.contains(id)) else {
                break;
            };
            tried.insert(id);
            if !meter.fits(&self.estimate_background(&p, false)?) {
                break;
            }
            let inf = match self.infer(&p, now, false, false, false) {
                Ok(inf) => inf,
                Err(e @ crate::Error::Backend(_)) => {
                    log::warn!("could not restore slices for `{}`: {e}", p.query);
                    continue;
                }
                Err(e) => return Err(e),
            };
            meter.spend(&inf.cost);
            let before: BTreeSet<NodeId> = self.bank.tree().nodes().filter(|n| n.is_present()).map(|n| n.id).collect();
            let nodes = self.bank.slice_and_insert(&p.layout, &p.tokens, &inf.qkv, now)?;
            let fresh: Vec<NodeId> = nodes.into_iter().filter(|n| !before.contains(n)).collect();
            restored.extend(fresh.iter().copied());
            let mut item = TickItem::new(TickAction::QaToQkv);
            item.query = Some(p.query.clone());
            item.nodes = fresh;
            item.cost = inf.cost;
            report.items.push(item);
        }
        Ok(restored)
    }

    /// QKV to QA conversion outside a tick: answers up to `limit` answer-less
    /// entries, oldest first.
    pub fn convert_qkv_to_qa(&mut self, limit: usize, now: u64) -> Result<Vec<EntryId>> {
        self.require_idle()?;
        let mut meter = Meter {
            left: f64::INFINITY,
            stopped: false,
        };
        let mut report = TickReport::empty(f64::INFINITY, self.strategy());
        self.qkv_to_qa_step(limit, now, &mut meter, &mut report)
    }

    /// QA to QKV conversion outside a tick: restores evicted slices for up to
    /// `limit` entries while they fit in free space.
    pub fn convert_qa_to_qkv(&mut self, limit: usize, now: u64) -> Result<Vec<NodeId>> {
        self.require_idle()?;
        let mut meter = Meter {
            left: f64::INFINITY,
            stopped: false,
        };
        let mut report = TickReport::empty(f64::INFINITY, self.strategy());
        self.qa_to_qkv_step(limit, now, &mut meter, &mut report)
    }

    fn enqueue(&mut self, queries: &[String], view: View) {
        for q in queries {
            if !self.population.iter().any(|p| &p.query == q) {
                self.population.push_back(PendingPrediction {
                    query: q.clone(),
                    view,
                });
            }
        }
    }

    fn run_predictions(&mut self, now: u64, report: &mut TickReport) {
        if self.predictor.abstract_due(now) {
            let texts: Vec<_> = self
                .predictor
                .pending_chunks()
                .iter()
                .filter_map(|id| self.bank.chunks.get(id).map(|c| (id.clone(), c.text.clone())))
                .collect();
            self.predictor.update_abstract(self.backend.as_ref(), &texts);
            report.items.push(TickItem::new(TickAction::Abstract));
        }
        if self.predictor.knowledge_due() {
            let batch = self.predictor.predict_from_knowledge(self.backend.as_ref());
            self.enqueue(&batch.queries, batch.view);
            let mut item = TickItem::new(TickAction::KnowledgePrediction);
            item.view = Some(view_name(batch.view));
            item.predicted = batch.queries;
            report.items.push(item);
        }
        if self.predictor.history_due(now) {
            let qa = &self.qa;
            let batch = self
                .predictor
                .predict_from_history(self.backend.as_ref(), |q| qa.find(q).is_some());
            self.enqueue(&batch.queries, batch.view);
            let mut item = TickItem::new(TickAction::HistoryPrediction);
            item.view = Some(view_name(batch.view));
            item.predicted = batch.queries;
            report.items.push(item);
        }
    }

    fn run_population(&mut self, strategy: PopulationStrategy, now: u64, meter: &mut Meter, report: &mut TickReport) -> Result<()> {
        let decode = strategy.decodes();
        while let Some(next) = self.population.front().cloned() {
            let p = self.prepare_query(&next.query)?;
            if !meter.fits(&self.estimate_background(&p, decode)?) {
                return Ok(());
            }
            self.population.pop_front();
            let inf = self.infer(&p, now, false, decode, false)?;
            meter.spend(&inf.cost);
            let written = self.populate(&p, &inf, now)?;
            let mut item = TickItem::new(TickAction::Populate);
            item.query = Some(next.query);
            item.view = Some(view_name(next.view));
            item.nodes = written.nodes;
            item.cost = inf.cost;
            report.items.push(item);
        }
        Ok(())
    }
}
