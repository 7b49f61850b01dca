const { exec } = require("child_process");

function catFile(fileName) {
  exec("cat " + fileName);
}
