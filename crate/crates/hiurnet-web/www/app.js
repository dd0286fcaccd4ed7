// Static page driver. Build the wasm package first:
//   rustup target add wasm32-unknown-unknown
//   cargo install wasm-pack
//   wasm-pack build crates/hiurnet-web --target web --out-dir www/pkg
// then serve this directory (e.g. python3 -m http.server) and open it.

import init, { DemoSession } from "./pkg/hiurnet_web.js";

const $ = (id) => document.getElementById(id);
const mapCanvas = $("map"), curveCanvas = $("curve"), barCanvas = $("bars");

let session = null;
let world = null;
let history = [];
let highlighted = [];

function worldParams() {
  return {
    seed: BigInt($("seed").value || 0),
    cities: Number($("cities").value),
    side: Number($("side").value),
    density: Number($("density").value),
    noise: Number($("noise").value),
  };
}

const CITY_HUES = [212, 26, 130, 288, 60, 350, 170, 95, 240, 18, 310, 70];

function drawMap() {
  const ctx = mapCanvas.getContext("2d");
  const w = mapCanvas.width, h = mapCanvas.height, pad = 14;
  ctx.clearRect(0, 0, w, h);
  if (!world) return;
  const px = (x) => pad + x * (w - 2 * pad);
  const py = (y) => pad + y * (h - 2 * pad);

  const maxVolume = world.max_volume || 1;
  for (const f of world.flows) {
    const t = f.volume / maxVolume;
    ctx.strokeStyle = `rgba(47,111,222,${0.05 + 0.3 * t})`;
    ctx.lineWidth = 0.5 + 2.5 * t;
    ctx.beginPath();
    ctx.moveTo(px(f.ox), py(f.oy));
    ctx.lineTo(px(f.dx), py(f.dy));
    ctx.stroke();
  }

  const maxPop = Math.max(...world.grids.map((g) => g.population), 1);
  const cell = (w - 2 * pad) / Math.sqrt(world.grids.length) * 0.72;
  for (const g of world.grids) {
    const hue = CITY_HUES[g.city % CITY_HUES.length];
    const light = 88 - 48 * Math.sqrt(g.population / maxPop);
    ctx.fillStyle = `hsl(${hue} 60% ${light}%)`;
    ctx.fillRect(px(g.x) - cell / 2, py(g.y) - cell / 2, cell, cell);
  }

  ctx.lineWidth = 2;
  for (const g of highlighted) {
    ctx.strokeStyle = "#d33";
    ctx.strokeRect(px(g.x) - cell / 2 - 2, py(g.y) - cell / 2 - 2, cell + 4, cell + 4);
  }
}

function drawCurve() {
  const ctx = curveCanvas.getContext("2d");
  const w = curveCanvas.width, h = curveCanvas.height, pad = 28;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#d8dde5";
  ctx.strokeRect(pad, 8, w - pad - 8, h - pad - 8);
  if (history.length < 2) return;

  const series = [
    { key: "loss", color: "#2f6fde" },
    { key: "val_rmse", color: "#d08a1d" },
  ];
  for (const s of series) {
    const values = history.map((r) => r[s.key]).filter((v) => isFinite(v));
    const max = Math.max(...values), min = Math.min(...values);
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 1.6;
    ctx.beginPath();
    history.forEach((r, i) => {
      const x = pad + (i / (history.length - 1)) * (w - pad - 16);
      const y = 8 + (1 - (r[s.key] - min) / (max - min + 1e-12)) * (h - pad - 16);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
  ctx.fillStyle = "#2f6fde";
  ctx.fillText("loss", pad + 4, 20);
  ctx.fillStyle = "#d08a1d";
  ctx.fillText("val RMSE (weighted)", pad + 44, 20);
  ctx.fillStyle = "#66707f";
  ctx.fillText(`epoch ${history.length}`, w - 70, h - 8);
}

function drawBars(payload) {
  const ctx = barCanvas.getContext("2d");
  const w = barCanvas.width, h = barCanvas.height;
  ctx.clearRect(0, 0, w, h);

  const grids = payload.grids.slice(0, 8);
  const maxAttr = Math.max(...grids.map((g) => g.attribution), 1e-12);
  ctx.fillStyle = "#1c2330";
  ctx.fillText(`top grids of city ${payload.city} (by attribution over ${payload.target_edges} edges)`, 8, 14);
  grids.forEach((g, i) => {
    const y = 24 + i * 18;
    ctx.fillStyle = "#2f6fde";
    ctx.fillRect(70, y, (g.attribution / maxAttr) * (w - 110), 12);
    ctx.fillStyle = "#66707f";
    ctx.fillText(`grid ${g.grid}`, 8, y + 10);
  });

  const base = 24 + grids.length * 18 + 22;
  ctx.fillStyle = "#1c2330";
  ctx.fillText("indicator categories (normalized)", 8, base - 6);
  const colors = { roads: "#4a7bd0", pois: "#51a06a", population: "#c2701f", railway: "#8b5cc9", other: "#999" };
  payload.rollup.forEach((r, i) => {
    const y = base + i * 18;
    ctx.fillStyle = colors[r.category] || "#999";
    ctx.fillRect(70, y, r.value * (w - 110), 12);
    ctx.fillStyle = "#66707f";
    ctx.fillText(r.category, 8, y + 10);
  });
}

function setStatus(text) {
  $("status").textContent = text;
}

function refreshCitySelect() {
  const select = $("city");
  select.innerHTML = "";
  for (let c = 0; c < session.city_count(); c++) {
    const option = document.createElement("option");
    option.value = c;
    option.textContent = c;
    select.appendChild(option);
  }
}

async function generate() {
  const p = worldParams();
  $("generate").disabled = true;
  setStatus("building world and model…");
  try {
    session = new DemoSession(p.seed, p.cities, p.side, p.density, p.noise);
    world = JSON.parse(session.map_json());
    history = [];
    highlighted = [];
    refreshCitySelect();
    drawMap();
    drawCurve();
    $("metrics").hidden = true;
    $("train").disabled = false;
    $("reset").disabled = false;
    $("explain").disabled = false;
    setStatus(`world ready: ${world.grids.length} grids, ${world.flow_count} flow records.`);
  } catch (e) {
    setStatus(`failed: ${e}`);
  } finally {
    $("generate").disabled = false;
  }
}

function showMetrics() {
  const data = JSON.parse(session.test_metrics());
  const tbody = $("metrics").querySelector("tbody");
  tbody.innerHTML = "";
  for (const task of ["C2M", "M2C", "M2M"]) {
    const m = data[task];
    const row = document.createElement("tr");
    row.innerHTML = m
      ? `<td>${task}</td><td>${m.n}</td><td>${m.rmse.toFixed(3)}</td><td>${m.mae.toFixed(3)}</td><td>${m.pcc.toFixed(3)}</td>`
      : `<td>${task}</td><td>0</td><td>-</td><td>-</td><td>-</td>`;
    tbody.appendChild(row);
  }
  $("metrics").hidden = false;
}

async function trainChunk() {
  $("train").disabled = true;
  const target = 25;
  let done = 0;
  const step = () => {
    try {
      const rows = JSON.parse(session.train_epochs(5));
      history.push(...rows);
      done += rows.length;
      drawCurve();
      setStatus(`epoch ${session.epochs_run()}: loss ${rows.at(-1).loss.toFixed(3)}, val RMSE ${rows.at(-1).val_rmse.toFixed(3)}`);
    } catch (e) {
      setStatus(`training failed: ${e}`);
      $("train").disabled = false;
      return;
    }
    if (done < target) {
      setTimeout(step, 0);
    } else {
      showMetrics();
      $("train").disabled = false;
    }
  };
  setTimeout(step, 0);
}

function resetModel() {
  const p = worldParams();
  session = new DemoSession(p.seed, p.cities, p.side, p.density, p.noise);
  history = [];
  highlighted = [];
  drawCurve();
  $("metrics").hidden = true;
  setStatus("model reinitialized.");
}

function explain() {
  $("explain").disabled = true;
  setStatus("running integrated gradients…");
  setTimeout(() => {
    try {
      const payload = JSON.parse(
        session.explain_city(Number($("city").value), Number($("k").value), Number($("steps").value))
      );
      drawBars(payload);
      highlighted = payload.grids.slice(0, 5);
      drawMap();
      const worstGap = Math.max(...payload.completeness_gaps);
      setStatus(`attributed ${payload.target_edges} edges; worst completeness gap ${worstGap.toExponential(2)}.`);
    } catch (e) {
      setStatus(`failed: ${e}`);
    } finally {
      $("explain").disabled = false;
    }
  }, 0);
}

await init();
$("generate").addEventListener("click", generate);
$("train").addEventListener("click", trainChunk);
$("reset").addEventListener("click", resetModel);
$("explain").addEventListener("click", explain);
setStatus("ready — generate a world.");
