import { Client } from "./api.js";
import { createWorkbench } from "./app.js";

function apiBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  if (fromQuery) return fromQuery;
  return `${window.location.protocol}//${window.location.hostname}:8707`;
}

window.addEventListener("DOMContentLoaded", () => {
  createWorkbench({ root: document, api: new Client(apiBase()) });
});
