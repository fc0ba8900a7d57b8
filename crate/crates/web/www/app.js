import init, { analyze, trace, candidates, examples } from "./pkg/easyflow_web.js";

const $ = (id) => document.getElementById(id);
const out = $("out");

function show(text, cls) {
  out.innerHTML = "";
  const pre = document.createElement("pre");
  if (cls) pre.className = cls;
  pre.textContent = text;
  out.appendChild(pre);
}

function guarded(fn) {
  return () => {
    $("verdict").textContent = "";
    try {
      fn();
    } catch (e) {
      show(String(e), "err");
    }
  };
}

const inputs = () => [$("code").value, $("data").value, $("value").value, $("state").value];

function runAnalyze() {
  const human = $("human").checked;
  const text = analyze(...inputs(), human);
  if (human) {
    const m = text.match(/^verdict: (.*)$/m);
    $("verdict").textContent = m ? m[1] : "";
  } else {
    $("verdict").textContent = JSON.parse(text).verdict;
  }
  show(text);
}

function runTrace() {
  const log = JSON.parse(trace(...inputs()));
  $("verdict").textContent = `${log.outcome}, ${log.steps.length} steps, ${log.events.length} arithmetic events`;
  const table = document.createElement("table");
  table.innerHTML = "<tr><th>pc</th><th>op</th><th>gas</th><th>taint (top first)</th><th>stack (top first)</th></tr>";
  for (const s of log.steps) {
    const tr = table.insertRow();
    if (s.taint.some(Boolean)) tr.className = "tainted";
    for (const v of [s.pc, s.op, s.gas, s.taint.map((t) => (t ? "T" : ".")).join(""), s.stack.join(" ")]) {
      tr.insertCell().textContent = v;
    }
  }
  out.innerHTML = "";
  out.appendChild(table);
}

function runCandidates() {
  const r = JSON.parse(candidates($("data").value, $("value").value, 64));
  $("verdict").textContent = `${r.candidates.length} shown of ${r.total} generated`;
  show(r.candidates.map((c, i) => `${i + 1}: value=${c.value} data=${c.data}`).join("\n"));
}

await init();
const list = JSON.parse(examples());
for (const ex of list) {
  const o = document.createElement("option");
  o.value = ex.name;
  o.textContent = `${ex.name} (${ex.abbreviation})`;
  $("example").appendChild(o);
}
$("example").onchange = () => {
  const ex = list.find((e) => e.name === $("example").value);
  $("example-desc").textContent = ex ? `${ex.description}. Expected: ${ex.expected}.` : "";
  if (!ex) return;
  $("code").value = ex.source.trim();
  $("data").value = ex.data;
  $("value").value = ex.value;
  $("state").value = ex.state;
};
$("analyze").onclick = guarded(runAnalyze);
$("trace").onclick = guarded(runTrace);
$("candidates").onclick = guarded(runCandidates);
