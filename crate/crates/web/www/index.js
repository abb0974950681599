import init, { render_plans, score_pair, explore_defects } from "./pkg/rmisel_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = { clean: "#2a7ab0", keyword_echo: "#d9822b", misalignment: "#8e44ad" };

function escape(s) {
  return s.replace(/[&<>]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;" }[c]));
}

function fail(el, e) {
  el.innerHTML = `<p class="err">${escape(String(e.message ?? e))}</p>`;
}

function fmt(v, digits = 4) {
  return v == null ? "–" : Number(v).toFixed(digits);
}

function renderPlans() {
  const out = $("plan-out");
  try {
    const res = JSON.parse(render_plans($("plan-q").value, $("plan-a").value, $("plan-family").value, $("plan-variant").value));
    out.innerHTML = res.plans
      .map((p) => `<h3>${p.direction} <small>(${p.template_variant})</small></h3>
        <pre><span class="ctx">${escape(p.context)}</span><span class="tgt">${escape(p.target)}</span><span class="ctx">${escape(p.suffix)}</span></pre>`)
      .join("") + res.unsupported.map((u) => `<p class="err">${u.direction}: ${escape(u.error)}</p>`).join("");
  } catch (e) {
    fail(out, e);
  }
}

function scorePair() {
  const out = $("score-out");
  try {
    const r = JSON.parse(score_pair($("score-q").value, $("score-a").value, Number($("score-seed").value),
      Number($("score-cu").value), Number($("score-cb").value)));
    const hinders = r.ifd_hinders ? " (query hinders the answer)" : "";
    out.innerHTML = `<table>
      <tr><th>PPL(Q)</th><td>${fmt(r.ppl_q)}</td></tr>
      <tr><th>PPL(Q|A)</th><td>${fmt(r.ppl_q_given_a)}</td></tr>
      <tr><th>PPL(A)</th><td>${fmt(r.ppl_a)}</td></tr>
      <tr><th>PPL(A|Q)</th><td>${fmt(r.ppl_a_given_q)}</td></tr>
      <tr><th>RMI</th><td>${fmt(r.rmi)}</td></tr>
      <tr><th>IFD</th><td>${fmt(r.ifd)}${hinders}</td></tr>
      <tr><th>status</th><td>${r.status}</td></tr></table>` +
      Object.entries(r.failures ?? {}).map(([d, m]) => `<p class="err">${d}: ${escape(m)}</p>`).join("");
  } catch (e) {
    fail(out, e);
  }
}

let points = [];
let layout = null;

function drawPlot() {
  const canvas = $("ex-plot");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!points.length) return;
  const yKey = $("ex-y").value;
  const pad = 40;
  const xs = points.map((p) => p.ln_ppl_q);
  const ys = points.map((p) => p[yKey]);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 2 * pad);
  const sy = (y) => canvas.height - pad - ((y - y0) / (y1 - y0 || 1)) * (canvas.height - 2 * pad);
  layout = { sx, sy, yKey };

  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, canvas.height - pad);
  ctx.lineTo(canvas.width - pad, canvas.height - pad);
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.fillText("ln PPL(Q)", canvas.width / 2, canvas.height - 10);
  ctx.fillText(yKey === "rmi" ? "RMI" : "within-bin rank", 4, pad - 10);
  ctx.fillText(fmt(x0, 2), pad, canvas.height - pad + 14);
  ctx.fillText(fmt(x1, 2), canvas.width - pad - 20, canvas.height - pad + 14);
  ctx.fillText(fmt(y1, 2), 4, pad + 4);
  ctx.fillText(fmt(y0, 2), 4, canvas.height - pad);

  for (const p of points) {
    ctx.fillStyle = COLORS[p.mode] ?? "#555";
    ctx.globalAlpha = 0.7;
    ctx.beginPath();
    ctx.arc(sx(p.ln_ppl_q), sy(p[yKey]), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.globalAlpha = 1;
}

function explore() {
  const out = $("ex-out");
  try {
    const res = JSON.parse(explore_defects(Number($("ex-n").value), Number($("ex-seed").value), Number($("ex-k").value)));
    points = res.points;
    drawPlot();
    $("ex-legend").innerHTML = Object.entries(COLORS)
      .map(([m, c]) => `<span style="color:${c}">● ${m}</span>`).join("");
    const rows = res.separation.modes.map((m) => `<tr><td>${m.mode}</td><td>${m.count}</td>
      <td>${fmt(m.rmi_median)}</td><td>${fmt(m.top2_fraction, 3)}</td><td>${fmt(m.bottom2_fraction, 3)}</td></tr>`);
    out.innerHTML = `<table><tr><th>mode</th><th>n</th><th>median RMI</th><th>top-2 deciles</th><th>bottom-2 deciles</th></tr>${rows.join("")}</table>`;
  } catch (e) {
    fail(out, e);
  }
}

function hover(ev) {
  if (!layout || !points.length) return;
  const rect = ev.target.getBoundingClientRect();
  const mx = ev.clientX - rect.left;
  const my = ev.clientY - rect.top;
  let best = null;
  let bestD = 64;
  for (const p of points) {
    const d = (layout.sx(p.ln_ppl_q) - mx) ** 2 + (layout.sy(p[layout.yKey]) - my) ** 2;
    if (d < bestD) {
      best = p;
      bestD = d;
    }
  }
  $("ex-hover").innerHTML = best
    ? `<pre><b>${best.id}</b> ${best.mode} · bin ${best.bin} · RMI ${fmt(best.rmi)} · rank ${fmt(best.normalized_rank, 3)}
Q: ${escape(best.query)}
A: ${escape(best.answer)}</pre>`
    : "";
}

await init();
$("plan-go").addEventListener("click", renderPlans);
$("score-go").addEventListener("click", scorePair);
$("ex-go").addEventListener("click", explore);
$("ex-y").addEventListener("change", drawPlot);
$("ex-plot").addEventListener("mousemove", hover);
renderPlans();
scorePair();
